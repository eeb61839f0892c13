"""Seeded experiment families and file formats.

Random numbers come from Philox-4x64-10 keyed by ``(seed, family id)``; the
k-th 64-bit word of the stream maps to ``(word >> 11) * 2**-53``. Period t of
a family owns a fixed, 4-word-aligned slice of the stream, so any block of
periods can be regenerated without touching the rest of the horizon and
the output is identical on every platform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .costs import (
    DEFAULT_BLOCK,
    CostSource,
    PiecewiseLinearCost,
    PiecewiseSeries,
    PwlBlock,
    QuadBlock,
    QuadraticCost,
    QuadraticSeries,
    TerminalCost,
    as_source,
    check_block_domain,
)
from .policy import StorageSpec
from .schedule import Schedule

SCHEMA_VERSION = 1
RNG_NAME = "philox4x64-10/uniform53"
FAMILIES = ("quadratic-tracking", "pwl-dispatch", "custom")
_FAMILY_KEY = {"quadratic-tracking": 1, "pwl-dispatch": 2}
ALPHA_FLOOR = 1e-3

DEFAULT_STORAGE = StorageSpec(P=1.0, E=4.0, eta=0.92, e0=2.0)


def default_terminal(spec: StorageSpec = DEFAULT_STORAGE) -> TerminalCost:
    return TerminalCost(kappa=1.0, e_ref=spec.E)


class ScenarioFormatError(ValueError):
    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


def uniform_words(seed: int, family: int, start_word: int, count: int) -> np.ndarray:
    """Uniforms in [0, 1) from words [start_word, start_word + count)."""
    if start_word % 4:
        raise ValueError("start_word must be a multiple of 4")
    bitgen = np.random.Philox(key=[seed, family], counter=[start_word // 4, 0, 0, 0])
    raw = bitgen.random_raw(count)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


# --------------------------------------------------------------------------
# streamed families


class StreamedQuadratic(CostSource):
    """Quadratic tracking costs generated block by block from the seed."""

    WORDS = 4

    def __init__(self, seed: int, T: int, alpha_range=(0.0, 10.0), beta_range=(-10.0, 0.0),
                 start: int = 0):
        lo, hi = alpha_range
        lo = max(lo, ALPHA_FLOOR)
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
            raise ValueError(f"invalid alpha range {alpha_range}")
        if not (math.isfinite(beta_range[0]) and math.isfinite(beta_range[1])
                and beta_range[0] <= beta_range[1]):
            raise ValueError(f"invalid beta range {beta_range}")
        if T < 1:
            raise ValueError("T must be at least 1")
        self.seed, self.T, self.start = int(seed), int(T), int(start)
        self.alpha_range = (lo, hi)
        self.beta_range = tuple(beta_range)

    def __len__(self):
        return self.T - self.start

    def _block(self, t0: int, n: int) -> QuadBlock:
        u = uniform_words(self.seed, _FAMILY_KEY["quadratic-tracking"],
                          self.WORDS * t0, self.WORDS * n).reshape(n, self.WORDS)
        (alo, ahi), (blo, bhi) = self.alpha_range, self.beta_range
        return QuadBlock(alo + (ahi - alo) * u[:, 0], blo + (bhi - blo) * u[:, 1])

    def cost(self, t):
        b = self._block(self.start + t, 1)
        return QuadraticCost(float(b.alpha[0]), float(b.beta[0]))

    def blocks(self, size=DEFAULT_BLOCK):
        for t0 in range(self.start, self.T, size):
            yield self._block(t0, min(size, self.T - t0))

    def window(self, start):
        return StreamedQuadratic(self.seed, self.T, self.alpha_range, self.beta_range,
                                 self.start + start)

    has_pwl = False

    def materialize(self) -> QuadraticSeries:
        b = self._block(self.start, len(self))
        return QuadraticSeries(b.alpha, b.beta)


class StreamedPwl(CostSource):
    """Piecewise-linear supply-curve costs generated block by block."""

    def __init__(self, seed: int, T: int, J: int, c_max: float = 50.0,
                 demand_span: float = 1.0, start: int = 0):
        if T < 1:
            raise ValueError("T must be at least 1")
        if J < 1:
            raise ValueError("J must be at least 1")
        if not (c_max >= 0 and math.isfinite(c_max)):
            raise ValueError(f"invalid c_max {c_max}")
        if not (demand_span > 0 and math.isfinite(demand_span)):
            raise ValueError(f"invalid demand_span {demand_span}")
        self.seed, self.T, self.J, self.start = int(seed), int(T), int(J), int(start)
        self.c_max, self.demand_span = float(c_max), float(demand_span)
        self.words = 4 * math.ceil((2 * J - 1) / 4)

    def __len__(self):
        return self.T - self.start

    def _block(self, t0: int, n: int) -> PwlBlock:
        J, span = self.J, self.demand_span
        u = uniform_words(self.seed, _FAMILY_KEY["pwl-dispatch"],
                          self.words * t0, self.words * n).reshape(n, self.words)
        c = np.sort(self.c_max * u[:, :J], axis=1)
        full = np.empty((n, J + 1))
        full[:, 0] = -span
        full[:, 1:J] = np.sort(-span + 2.0 * span * u[:, J:2 * J - 1], axis=1)
        full[:, J] = span
        sep = 1e-9 * span
        ramp = sep * np.arange(J + 1)
        # h non-decreasing <=> consecutive quantities at least sep apart
        h = np.maximum.accumulate(full - ramp, axis=1)
        h = np.minimum.accumulate(h[:, ::-1], axis=1)[:, ::-1]
        full = h + ramp
        offsets = np.arange(0, n * J + 1, J, dtype=np.int64)
        return PwlBlock(c.ravel(), full[:, 1:].ravel(), offsets, full[:, 0].copy())

    def cost(self, t):
        b = self._block(self.start + t, 1)
        return PiecewiseLinearCost(float(b.q_lo[0]), b.c, b.q)

    def blocks(self, size=DEFAULT_BLOCK):
        for t0 in range(self.start, self.T, size):
            yield self._block(t0, min(size, self.T - t0))

    def window(self, start):
        return StreamedPwl(self.seed, self.T, self.J, self.c_max, self.demand_span,
                           self.start + start)

    has_pwl = True

    def materialize(self) -> PiecewiseSeries:
        b = self._block(self.start, len(self))
        return PiecewiseSeries(b.c, b.q, b.offsets, b.q_lo)


# --------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    spec: StorageSpec
    costs: CostSource
    terminal: TerminalCost
    seed: Optional[int] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.costs = as_source(self.costs)
        if len(self.costs) < 1:
            raise ValueError("a scenario needs at least one period")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        for block in self.costs.blocks():
            check_block_domain(block, -self.spec.P, self.spec.P)

    @property
    def T(self) -> int:
        return len(self.costs)

    def streamed(self) -> CostSource:
        """Cost source that regenerates periods on demand (seeded families only)."""
        if self.family == "quadratic-tracking":
            return StreamedQuadratic(self.seed, self.T, **self.params)
        if self.family == "pwl-dispatch":
            return StreamedPwl(self.seed, self.T, **self.params)
        return self.costs

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.spec == other.spec and self.terminal == other.terminal
            and self.seed == other.seed and self.family == other.family
            and self.T == other.T and all(a == b for a, b in zip(self.costs, other.costs))
        )


def generate_quadratic(seed: int, T: int, alpha_range=(0.0, 10.0), beta_range=(-10.0, 0.0),
                       spec: StorageSpec = DEFAULT_STORAGE,
                       terminal: Optional[TerminalCost] = None) -> Scenario:
    """Generation-tracking family ``alpha/2 (beta - p)^2``; alpha floored at 1e-3."""
    stream = StreamedQuadratic(seed, T, alpha_range, beta_range)
    params = {"alpha_range": list(stream.alpha_range), "beta_range": list(stream.beta_range)}
    return Scenario(spec, stream.materialize(), terminal or default_terminal(spec),
                    int(seed), "quadratic-tracking", params)


def generate_pwl(seed: int, T: int, J: int, c_max: float = 50.0, demand_span: float = 1.0,
                 spec: StorageSpec = DEFAULT_STORAGE,
                 terminal: Optional[TerminalCost] = None) -> Scenario:
    """Supply-curve family: J sorted uniform marginals on J cells of [-span, span]."""
    if demand_span < spec.P:
        raise ValueError(f"demand_span={demand_span} must cover the power limit P={spec.P}")
    stream = StreamedPwl(seed, T, J, c_max, demand_span)
    params = {"J": int(J), "c_max": float(c_max), "demand_span": float(demand_span)}
    return Scenario(spec, stream.materialize(), terminal or default_terminal(spec),
                    int(seed), "pwl-dispatch", params)


# --------------------------------------------------------------------------
# JSON scenario files


def _cost_to_json(cost) -> dict:
    if isinstance(cost, QuadraticCost):
        return {"type": "quad", "alpha": cost.alpha, "beta": cost.beta}
    return {"type": "pwl", "q_lo": cost.q_lo,
            "segments": [[float(a), float(b)] for a, b in zip(cost.c, cost.q)]}


def scenario_to_dict(scenario: Scenario) -> dict:
    s, term = scenario.spec, scenario.terminal
    return {
        "version": SCHEMA_VERSION,
        "rng": RNG_NAME,
        "family": scenario.family,
        "seed": scenario.seed,
        "params": scenario.params,
        "storage": {"P": s.P, "E": s.E, "eta": s.eta, "e0": s.e0},
        "T": scenario.T,
        "terminal": {"kappa": term.kappa, "e_ref": term.e_ref, "slope": term.linear_slope},
        "costs": [_cost_to_json(k) for k in scenario.costs],
    }


def write_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario)) + "\n")


def _require(obj, key, where, kind=None):
    if not isinstance(obj, dict):
        raise ScenarioFormatError("expected an object", field=where)
    if key not in obj:
        raise ScenarioFormatError("missing field", field=f"{where}.{key}" if where else key)
    value = obj[key]
    name = f"{where}.{key}" if where else key
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioFormatError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioFormatError(f"expected an integer, got {value!r}", field=name)
    return value


def _cost_from_json(obj, where):
    kind = _require(obj, "type", where)
    try:
        if kind == "quad":
            return QuadraticCost(_require(obj, "alpha", where, float),
                                 _require(obj, "beta", where, float))
        if kind == "pwl":
            segs = _require(obj, "segments", where)
            if not isinstance(segs, list) or not all(
                    isinstance(s, list) and len(s) == 2 for s in segs):
                raise ScenarioFormatError("expected a list of [c, q] pairs",
                                          field=f"{where}.segments")
            return PiecewiseLinearCost.from_segments(_require(obj, "q_lo", where, float), segs)
    except ScenarioFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioFormatError(str(exc), field=where) from exc
    raise ScenarioFormatError(f"unknown cost type {kind!r}", field=f"{where}.type")


def scenario_from_dict(doc) -> Scenario:
    version = _require(doc, "version", "", int)
    if version != SCHEMA_VERSION:
        raise ScenarioFormatError(f"unsupported version {version}", field="version")
    st = _require(doc, "storage", "")
    try:
        spec = StorageSpec(*(_require(st, k, "storage", float) for k in ("P", "E", "eta", "e0")))
    except ScenarioFormatError:
        raise
    except ValueError as exc:
        raise ScenarioFormatError(str(exc), field="storage") from exc
    tm = _require(doc, "terminal", "")
    try:
        term = TerminalCost(_require(tm, "kappa", "terminal", float),
                            _require(tm, "e_ref", "terminal", float),
                            float(tm.get("slope", 0.0)))
    except ScenarioFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioFormatError(str(exc), field="terminal") from exc
    T = _require(doc, "T", "", int)
    costs_doc = _require(doc, "costs", "")
    if not isinstance(costs_doc, list):
        raise ScenarioFormatError("expected a list", field="costs")
    if len(costs_doc) != T:
        raise ScenarioFormatError(f"T={T} but {len(costs_doc)} costs given", field="costs")
    costs = [_cost_from_json(c, f"costs[{i}]") for i, c in enumerate(costs_doc)]
    family = doc.get("family", "custom")
    if family not in FAMILIES:
        raise ScenarioFormatError(f"unknown family {family!r}", field="family")
    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ScenarioFormatError(f"expected an integer, got {seed!r}", field="seed")
    try:
        return Scenario(spec, costs, term, seed, family, dict(doc.get("params") or {}))
    except ValueError as exc:
        raise ScenarioFormatError(str(exc), field="costs") from exc


def read_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(exc.msg, line=exc.lineno) from exc
    return scenario_from_dict(doc)


# --------------------------------------------------------------------------
# schedule CSV

SCHEDULE_COLUMNS = ("t", "p_plus", "p_minus", "net", "soc", "theta")


def write_schedule(schedule: Schedule, path) -> None:
    """One row per period end t = 0..T; row 0 carries the initial state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCHEDULE_COLUMNS)
        w.writerow([0, 0.0, 0.0, 0.0, repr(float(schedule.soc[0])), repr(float(schedule.theta[0]))])
        for t in range(schedule.T):
            pp, pm = float(schedule.p_plus[t]), float(schedule.p_minus[t])
            w.writerow([t + 1, repr(pp), repr(pm), repr(pp - pm),
                        repr(float(schedule.soc[t + 1])), repr(float(schedule.theta[t + 1]))])


def read_schedule(path) -> Schedule:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCHEDULE_COLUMNS:
            raise ScenarioFormatError(f"expected columns {','.join(SCHEDULE_COLUMNS)}", line=1)
        rows = []
        for i, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[k]) for k in SCHEDULE_COLUMNS])
            except (TypeError, ValueError) as exc:
                raise ScenarioFormatError(str(exc), line=i) from exc
    if len(rows) < 2:
        raise ScenarioFormatError("schedule needs the initial row and at least one period")
    data = np.array(rows)
    if not np.array_equal(data[:, 0], np.arange(len(rows))):
        raise ScenarioFormatError("rows must be numbered 0..T in order", field="t")
    return Schedule(data[1:, 1], data[1:, 2], data[:, 4], data[:, 5])
