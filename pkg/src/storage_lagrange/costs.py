"""Per-period convex operating costs, terminal cost, and cost sources.

A cost source is an indexed, possibly streamed, sequence of per-period costs.
The solver never asks for the whole horizon at once: it iterates
:meth:`CostSource.blocks`, which yields homogeneous parameter blocks of
bounded size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence, Union

import numpy as np

from . import _kernels

DEFAULT_BLOCK = 4096


class DomainError(ValueError):
    """A dispatch or storage limit falls outside a cost curve's domain."""


@dataclass(frozen=True)
class QuadraticCost:
    """Tracking cost ``alpha/2 * (beta - p)**2``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not math.isfinite(self.beta):
            raise ValueError(f"beta must be finite, got {self.beta}")

    def value(self, p: float) -> float:
        return 0.5 * self.alpha * (self.beta - p) ** 2

    def marginal(self, p: float) -> float:
        return self.alpha * (p - self.beta)

    def subgradient(self, p: float) -> tuple[float, float]:
        g = self.marginal(p)
        return g, g

    def inverse_marginal(self, x: float) -> float:
        return self.beta + x / self.alpha

    def domain(self) -> tuple[float, float]:
        return -math.inf, math.inf


@dataclass(frozen=True, eq=False)
class PiecewiseLinearCost:
    """Convex cost with a step marginal.

    ``c[j]`` is the marginal cost on ``[q[j-1], q[j])`` with ``q[-1] == q_lo``.
    The cost is anchored at ``O(q_lo) = 0``.
    """

    q_lo: float
    c: np.ndarray
    q: np.ndarray
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = np.array(self.c, dtype=float).ravel()
        q = np.array(self.q, dtype=float).ravel()
        if c.size == 0 or c.size != q.size:
            raise ValueError("need one quantity per marginal cost and at least one segment")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(q)) and math.isfinite(self.q_lo)):
            raise ValueError("segment data must be finite")
        if np.any(np.diff(c) < 0):
            raise ValueError("marginal costs must be non-decreasing")
        if not (self.q_lo < q[0] and np.all(np.diff(q) > 0)):
            raise ValueError("quantities must be strictly increasing above q_lo")
        c.flags.writeable = False
        q.flags.writeable = False
        widths = np.diff(np.concatenate(([self.q_lo], q)))
        cum = np.concatenate(([0.0], np.cumsum(c * widths)))
        cum.flags.writeable = False
        object.__setattr__(self, "q_lo", float(self.q_lo))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_segments(cls, q_lo: float, segments: Sequence[Sequence[float]]):
        seg = np.asarray(segments, dtype=float).reshape(-1, 2)
        return cls(q_lo, seg[:, 0], seg[:, 1])

    @property
    def segments(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.c, self.q)]

    def __eq__(self, other):
        if not isinstance(other, PiecewiseLinearCost):
            return NotImplemented
        return (
            self.q_lo == other.q_lo
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.q, other.q)
        )

    def __hash__(self):
        return hash((self.q_lo, self.c.tobytes(), self.q.tobytes()))

    def _check(self, p: float) -> None:
        if not (self.q_lo <= p <= self.q[-1]):
            raise DomainError(f"p={p} outside cost domain [{self.q_lo}, {self.q[-1]}]")

    def value(self, p: float) -> float:
        self._check(p)
        j = int(np.searchsorted(self.q, p, side="left"))
        left = self.q_lo if j == 0 else self.q[j - 1]
        return float(self._cum[j] + self.c[min(j, self.c.size - 1)] * (p - left))

    def marginal(self, p: float) -> float:
        self._check(p)
        j = int(np.searchsorted(self.q, p, side="right"))
        return float(self.c[min(j, self.c.size - 1)])

    def subgradient(self, p: float) -> tuple[float, float]:
        """(left, right) one-sided marginals; domain endpoints use the edge segment."""
        self._check(p)
        right = self.marginal(p)
        j = int(np.searchsorted(self.q, p, side="left"))
        left = float(self.c[min(j, self.c.size - 1)])
        return left, right

    def inverse_marginal(self, x: float) -> float:
        k = int(np.searchsorted(self.c, x, side="right"))
        return self.q_lo if k == 0 else float(self.q[k - 1])

    def domain(self) -> tuple[float, float]:
        return self.q_lo, float(self.q[-1])


CostFunction = Union[QuadraticCost, PiecewiseLinearCost]


@dataclass(frozen=True)
class TerminalCost:
    """``kappa/2 * (e - e_ref)**2 + linear_slope * (e - e_ref)``."""

    kappa: float = 0.0
    e_ref: float = 0.0
    linear_slope: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")
        if not (math.isfinite(self.kappa) and math.isfinite(self.e_ref)
                and math.isfinite(self.linear_slope)):
            raise ValueError("terminal cost parameters must be finite")

    def value(self, e: float) -> float:
        d = e - self.e_ref
        return 0.5 * self.kappa * d * d + self.linear_slope * d

    def marginal(self, e: float) -> float:
        return self.kappa * (e - self.e_ref) + self.linear_slope


def eval_cost(cost: CostFunction, p: float) -> float:
    return cost.value(p)


def marginal(cost: CostFunction, p: float) -> float:
    return cost.marginal(p)


def inverse_marginal(cost: CostFunction, x: float) -> float:
    """Pseudo-inverse ``sup{y : o(y) <= x}``, clipped to the PWL domain."""
    return cost.inverse_marginal(x)


def terminal_marginal(term: TerminalCost, e: float) -> float:
    return term.marginal(e)


# --------------------------------------------------------------------------
# cost sources


class QuadBlock(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray


class PwlBlock(NamedTuple):
    c: np.ndarray
    q: np.ndarray
    offsets: np.ndarray
    q_lo: np.ndarray


Block = Union[QuadBlock, PwlBlock]


class CostSource:
    """Indexed sequence of per-period costs, consumed block by block."""

    def __len__(self) -> int:
        raise NotImplementedError

    def cost(self, t: int) -> CostFunction:
        """Cost of period t (0-based)."""
        raise NotImplementedError

    def blocks(self, size: int = DEFAULT_BLOCK) -> Iterator[Block]:
        raise NotImplementedError

    def window(self, start: int) -> "CostSource":
        """The tail of the horizon starting at period ``start`` (0-based)."""
        raise NotImplementedError

    @property
    def has_pwl(self) -> bool:
        """Whether any period is piecewise linear."""
        return any(isinstance(b, PwlBlock) for b in self.blocks())

    def __getitem__(self, t: int) -> CostFunction:
        n = len(self)
        if t < 0:
            t += n
        if not 0 <= t < n:
            raise IndexError(t)
        return self.cost(t)

    def __iter__(self):
        for t in range(len(self)):
            yield self.cost(t)


class QuadraticSeries(CostSource):
    """Quadratic costs held as two parameter arrays."""

    def __init__(self, alpha, beta):
        alpha = np.ascontiguousarray(alpha, dtype=float)
        beta = np.ascontiguousarray(beta, dtype=float)
        if alpha.ndim != 1 or alpha.shape != beta.shape:
            raise ValueError("alpha and beta must be 1-D arrays of equal length")
        if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
            raise ValueError("every alpha must be positive and finite")
        if not np.all(np.isfinite(beta)):
            raise ValueError("every beta must be finite")
        self.alpha = alpha
        self.beta = beta

    def __len__(self):
        return self.alpha.size

    def cost(self, t):
        return QuadraticCost(float(self.alpha[t]), float(self.beta[t]))

    def blocks(self, size=DEFAULT_BLOCK):
        for s in range(0, self.alpha.size, size):
            yield QuadBlock(self.alpha[s:s + size], self.beta[s:s + size])

    def window(self, start):
        return QuadraticSeries(self.alpha[start:], self.beta[start:])

    has_pwl = False


class PiecewiseSeries(CostSource):
    """Piecewise-linear costs packed into flat arrays."""

    def __init__(self, c, q, offsets, q_lo):
        self.c = np.ascontiguousarray(c, dtype=float)
        self.q = np.ascontiguousarray(q, dtype=float)
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.q_lo = np.ascontiguousarray(q_lo, dtype=float)
        if self.offsets.size != self.q_lo.size + 1:
            raise ValueError("offsets must have one entry more than q_lo")

    @classmethod
    def from_costs(cls, costs: Sequence[PiecewiseLinearCost]) -> "PiecewiseSeries":
        lengths = [k.c.size for k in costs]
        offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
        c = np.concatenate([k.c for k in costs]) if costs else np.empty(0)
        q = np.concatenate([k.q for k in costs]) if costs else np.empty(0)
        return cls(c, q, offsets, [k.q_lo for k in costs])

    def __len__(self):
        return self.q_lo.size

    def cost(self, t):
        s, e = self.offsets[t], self.offsets[t + 1]
        return PiecewiseLinearCost(float(self.q_lo[t]), self.c[s:e], self.q[s:e])

    def blocks(self, size=DEFAULT_BLOCK):
        for s in range(0, self.q_lo.size, size):
            yield PwlBlock(self.c, self.q, self.offsets[s:s + size + 1], self.q_lo[s:s + size])

    def window(self, start):
        return PiecewiseSeries(self.c, self.q, self.offsets[start:], self.q_lo[start:])

    has_pwl = True


class MixedSource(CostSource):
    """Arbitrary list of costs, packed into homogeneous runs."""

    def __init__(self, costs: Sequence[CostFunction]):
        self._costs = list(costs)
        self._runs: list[tuple[int, CostSource]] = []
        start = 0
        while start < len(self._costs):
            kind = type(self._costs[start])
            stop = start
            while stop < len(self._costs) and type(self._costs[stop]) is kind:
                stop += 1
            self._runs.append((start, _pack(self._costs[start:stop])))
            start = stop

    def __len__(self):
        return len(self._costs)

    def cost(self, t):
        return self._costs[t]

    def blocks(self, size=DEFAULT_BLOCK):
        for _, run in self._runs:
            yield from run.blocks(size)

    def window(self, start):
        return as_source(self._costs[start:])

    @property
    def has_pwl(self):
        return any(isinstance(run, PiecewiseSeries) for _, run in self._runs)


def _pack(costs: Sequence[CostFunction]) -> CostSource:
    if all(isinstance(k, QuadraticCost) for k in costs):
        return QuadraticSeries([k.alpha for k in costs], [k.beta for k in costs])
    if all(isinstance(k, PiecewiseLinearCost) for k in costs):
        return PiecewiseSeries.from_costs(costs)
    raise TypeError("homogeneous run expected")


def as_source(costs) -> CostSource:
    """Wrap a sequence of cost objects (or pass a source through)."""
    if isinstance(costs, CostSource):
        return costs
    costs = list(costs)
    for k in costs:
        if not isinstance(k, (QuadraticCost, PiecewiseLinearCost)):
            raise TypeError(f"not a cost function: {k!r}")
    if costs and len({type(k) for k in costs}) == 1:
        return _pack(costs)
    return MixedSource(costs)


def block_len(block: Block) -> int:
    return block.alpha.size if isinstance(block, QuadBlock) else block.q_lo.size


def block_marginals(block: Block, p: np.ndarray) -> np.ndarray:
    if isinstance(block, QuadBlock):
        return block.alpha * (p - block.beta)
    return _kernels.pwl_marginal_at(block.c, block.q, block.offsets, p)


def block_values(block: Block, p: np.ndarray) -> np.ndarray:
    if isinstance(block, QuadBlock):
        return 0.5 * block.alpha * (block.beta - p) ** 2
    q_hi = block.q[block.offsets[1:] - 1]
    if np.any(p < block.q_lo) or np.any(p > q_hi):
        raise DomainError("dispatch outside piecewise-linear cost domain")
    return _kernels.pwl_value_at(block.c, block.q, block.offsets, block.q_lo, p)


def check_block_domain(block: Block, lo: float, hi: float) -> None:
    """Raise DomainError unless every PWL domain in the block covers [lo, hi]."""
    if isinstance(block, QuadBlock):
        return
    q_hi = block.q[block.offsets[1:] - 1]
    if np.any(block.q_lo > lo) or np.any(q_hi < hi):
        bad = int(np.argmax((block.q_lo > lo) | (q_hi < hi)))
        raise DomainError(
            f"cost domain [{block.q_lo[bad]}, {q_hi[bad]}] does not cover [{lo}, {hi}]"
        )


def marginal_envelope(costs, term: TerminalCost, bounds: tuple[float, float],
                      eta: float) -> tuple[float, float]:
    """Symmetric dual search range enclosing every optimal dual.

    ``hi = max_t max_{|p|<=P} |o_t(p)| / eta + max_{0<=e<=E} |c_T(e)|``.
    """
    P, E = bounds
    source = as_source(costs)
    if len(source) == 0:
        raise ValueError("need at least one period")
    top = 0.0
    for block in source.blocks():
        check_block_domain(block, -P, P)
        n = block_len(block)
        lo_m = block_marginals(block, np.full(n, -P))
        hi_m = block_marginals(block, np.full(n, P))
        top = max(top, float(np.max(np.abs(lo_m))), float(np.max(np.abs(hi_m))))
        del block, lo_m, hi_m  # free before the next block is produced
    term_max = max(abs(term.marginal(0.0)), abs(term.marginal(E)))
    hi = top / eta + term_max
    return -hi, hi
