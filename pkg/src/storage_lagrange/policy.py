"""Lagrangian dispatch policy and the unclamped state-of-charge emulation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .costs import (
    DEFAULT_BLOCK,
    CostFunction,
    DomainError,
    QuadBlock,
    as_source,
    block_len,
    check_block_domain,
)


@dataclass(frozen=True)
class StorageSpec:
    """Power limit P (energy per period), capacity E, efficiency eta, initial SoC e0."""

    P: float
    E: float
    eta: float
    e0: float

    def __post_init__(self):
        for name in ("P", "E", "eta", "e0"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if not self.P > 0:
            raise ValueError(f"P must be positive, got {self.P}")
        if not self.E > 0:
            raise ValueError(f"E must be positive, got {self.E}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not 0 <= self.e0 <= self.E:
            raise ValueError(f"e0 must lie in [0, E={self.E}], got {self.e0}")

    def replace_e0(self, e0: float) -> "StorageSpec":
        return StorageSpec(self.P, self.E, self.eta, min(max(e0, 0.0), self.E))


@dataclass(frozen=True)
class Dispatch:
    p_plus: float  # discharge
    p_minus: float  # charge

    @property
    def net(self) -> float:
        return self.p_plus - self.p_minus


class PolicyVariant(enum.IntEnum):
    RELAXED = _kernels.RELAXED
    CHARGE_PREFERRING = _kernels.CHARGE_PREFERRING
    DISCHARGE_PREFERRING = _kernels.DISCHARGE_PREFERRING


class OutcomeKind(enum.Enum):
    HIT_UPPER = _kernels.HIT_UPPER
    HIT_LOWER = _kernels.HIT_LOWER
    COMPLETED = _kernels.COMPLETED


@dataclass
class SimOutcome:
    """Result of one forward simulation.

    ``tau`` is the 1-based crossing period (or T when completed) and ``sigma``
    the emulated SoC there. With prefix collection on, ``p_plus``/``p_minus``/
    ``soc`` cover every simulated period including the crossing one.
    """

    kind: OutcomeKind
    tau: int
    sigma: float
    p_plus: Optional[np.ndarray] = None
    p_minus: Optional[np.ndarray] = None
    soc: Optional[np.ndarray] = None

    @property
    def prefix_len(self) -> int:
        return self.tau if self.kind is OutcomeKind.COMPLETED else self.tau - 1


def _clip(v: float, P: float) -> float:
    return min(max(v, 0.0), P)


def policy_dispatch(spec: StorageSpec, cost: CostFunction, x: float,
                    variant: PolicyVariant = PolicyVariant.RELAXED) -> Dispatch:
    lo, hi = cost.domain()
    if lo > -spec.P or hi < spec.P:
        raise DomainError(f"cost domain [{lo}, {hi}] does not cover [-{spec.P}, {spec.P}]")
    pp = _clip(cost.inverse_marginal(-x / spec.eta), spec.P)
    pm = _clip(-cost.inverse_marginal(-x * spec.eta), spec.P)
    if variant is PolicyVariant.CHARGE_PREFERRING and pm > 0:
        pp = 0.0
    elif variant is PolicyVariant.DISCHARGE_PREFERRING and pp > 0:
        pm = 0.0
    return Dispatch(pp, pm)


def soc_step(spec: StorageSpec, sigma_prev: float, d: Dispatch) -> float:
    return sigma_prev - d.p_plus / spec.eta + d.p_minus * spec.eta


_EMPTY = np.empty(0)


def run_blocks(spec: StorageSpec, source, xa: float, variant: int, *,
               mode: int = _kernels.MODE_CLASSIFY, record: bool = False,
               xb: Optional[float] = None, lam: float = 0.0,
               block_size: int = DEFAULT_BLOCK, check_domain: bool = True):
    """Drive the compiled kernels over ``source``.

    Quadratic blocks are always dispatched at ``xa`` when ``lam == 0``, and at
    the midpoint of (xa, xb) otherwise; piecewise-linear blocks mix
    ``pi(xa)`` and ``pi(xb)`` with weight ``lam``.
    """
    P, E, eta = spec.P, spec.E, spec.eta
    sigma = spec.e0
    done = 0
    xb = xa if xb is None else xb
    x_quad = xa if lam == 0.0 else 0.5 * (xa + xb)
    chunks = [] if record else None
    for block in source.blocks(block_size):
        if check_domain:
            check_block_domain(block, -P, P)
        n = block_len(block)
        if record:
            pp, pm, sg = np.empty(n), np.empty(n), np.empty(n)
        else:
            pp = pm = sg = _EMPTY
        if isinstance(block, QuadBlock):
            status, i, sigma = _kernels.simulate_quad(
                block.alpha, block.beta, P, E, eta, x_quad, variant, sigma, mode,
                record, pp, pm, sg)
        else:
            status, i, sigma = _kernels.simulate_pwl(
                block.c, block.q, block.offsets, block.q_lo, P, E, eta, xa, xb, lam,
                variant, sigma, mode, record, pp, pm, sg)
        if record:
            k = i + 1 if status != _kernels.COMPLETED else n
            chunks.append((pp[:k], pm[:k], sg[:k]))
        if status != _kernels.COMPLETED:
            return status, done + i + 1, sigma, chunks
        done += n
        # drop this block before the source builds the next one
        del block, pp, pm, sg
    return _kernels.COMPLETED, done, sigma, chunks


def _outcome(status, tau, sigma, chunks) -> SimOutcome:
    out = SimOutcome(OutcomeKind(status), tau, sigma)
    if chunks is not None:
        if chunks:
            out.p_plus = np.concatenate([c[0] for c in chunks])
            out.p_minus = np.concatenate([c[1] for c in chunks])
            out.soc = np.concatenate([c[2] for c in chunks])
        else:
            out.p_plus = out.p_minus = out.soc = np.empty(0)
    return out


def simulate(spec: StorageSpec, cost_source, x: float,
             variant: PolicyVariant = PolicyVariant.RELAXED,
             collect_prefix: bool = False) -> SimOutcome:
    """Forward-simulate the policy at dual guess ``x`` until the first crossing.

    A period counts as a crossing when sigma >= E (upper) or sigma <= 0
    (lower). Without prefix collection the working state is O(1) in T.
    """
    source = as_source(cost_source)
    if len(source) == 0:
        raise ValueError("need at least one period")
    status, tau, sigma, chunks = run_blocks(
        spec, source, x, int(variant), record=collect_prefix)
    return _outcome(status, tau, sigma, chunks)
