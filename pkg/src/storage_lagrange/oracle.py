"""Independent checks: grid dynamic programming and KKT residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costs import TerminalCost, as_source, block_len, block_marginals, block_values
from .policy import StorageSpec
from .schedule import Schedule, objective_of

__all__ = [
    "DpConfig",
    "KktReport",
    "InfeasibleScheduleError",
    "dp_solve",
    "kkt_residuals",
    "objective_of",
    "check_feasible",
    "marginal_scale",
]

FEAS_TOL = 1e-9


class InfeasibleScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    soc_points: int = 401
    power_points: int = 201
    interpolation: bool = True

    def __post_init__(self):
        if self.soc_points < 2:
            raise ValueError("soc_points must be at least 2")
        if self.power_points < 3:
            raise ValueError("power_points must be at least 3")


def _power_grid(P: float, n: int) -> np.ndarray:
    u = np.linspace(-P, P, n)
    if not np.any(u == 0.0):
        u = np.sort(np.append(u, 0.0))
    return u


def _next_soc(e, u, eta):
    # non-simultaneous by construction: the sign of u picks the branch
    return e - np.where(u > 0, u / eta, u * eta)


def _stage_costs(source, u) -> np.ndarray:
    """(T, n_u) matrix of O_t(u)."""
    rows = []
    for block in source.blocks():
        n = block_len(block)
        cols = [block_values(block, np.full(n, uj)) for uj in u]
        rows.append(np.stack(cols, axis=1))
    return np.concatenate(rows, axis=0)


def dp_solve(spec: StorageSpec, cost_source, term: TerminalCost,
             cfg: DpConfig = DpConfig()) -> Schedule:
    """Backward value iteration on an SoC grid with net-power actions.

    Values between SoC grid points are linearly interpolated (nearest grid
    point when interpolation is off). The forward pass starts from the exact
    e0 and keeps the exact SoC, so the reported objective is exact for the
    returned schedule.
    """
    source = as_source(cost_source)
    T = len(source)
    if T == 0:
        raise ValueError("need at least one period")
    grid = np.linspace(0.0, spec.E, cfg.soc_points)
    u = _power_grid(spec.P, cfg.power_points)
    stage = _stage_costs(source, u)
    nxt = _next_soc(grid[:, None], u[None, :], spec.eta)  # (n_e, n_u)
    feasible = (nxt >= -FEAS_TOL) & (nxt <= spec.E + FEAS_TOL)
    nxt = np.clip(nxt, 0.0, spec.E)

    def lookup(values, e):
        if cfg.interpolation:
            return np.interp(e, grid, values)
        idx = np.rint(e / spec.E * (cfg.soc_points - 1)).astype(int)
        return values[idx]

    V = np.empty((T + 1, grid.size))
    V[T] = [term.value(e) for e in grid]
    for t in range(T - 1, -1, -1):
        q = stage[t][None, :] + lookup(V[t + 1], nxt)
        V[t] = np.min(np.where(feasible, q, np.inf), axis=1)

    net = np.empty(T)
    e = spec.e0
    for t in range(T):
        e_next = _next_soc(e, u, spec.eta)
        ok = (e_next >= -FEAS_TOL) & (e_next <= spec.E + FEAS_TOL)
        q = stage[t] + lookup(V[t + 1], np.clip(e_next, 0.0, spec.E))
        q = np.where(ok, q, np.inf)
        j = int(np.argmin(q))
        net[t] = u[j]
        e = float(np.clip(e_next[j], 0.0, spec.E))
    sched = Schedule.from_net(net, spec.e0, spec.eta)
    sched.soc = np.clip(sched.soc, 0.0, spec.E)
    sched.objective = objective_of(spec, source, term, sched)
    sched.meta["value_estimate"] = float(np.interp(spec.e0, grid, V[0]))
    return sched


@dataclass(frozen=True)
class KktReport:
    max_stationarity_residual: float
    max_complementarity_residual: float
    max_dual_infeasibility: float
    worst_period: int  # 1-based; T + 1 denotes the terminal condition

    @property
    def max_residual(self) -> float:
        return max(self.max_stationarity_residual, self.max_complementarity_residual,
                   self.max_dual_infeasibility)


def check_feasible(spec: StorageSpec, schedule: Schedule, tol: float = FEAS_TOL) -> None:
    pp, pm, soc = schedule.p_plus, schedule.p_minus, schedule.soc
    if np.any(pp < -tol) or np.any(pp > spec.P + tol):
        raise InfeasibleScheduleError("discharge outside [0, P]")
    if np.any(pm < -tol) or np.any(pm > spec.P + tol):
        raise InfeasibleScheduleError("charge outside [0, P]")
    if np.any(soc < -tol) or np.any(soc > spec.E + tol):
        raise InfeasibleScheduleError("state of charge outside [0, E]")
    if abs(soc[0] - spec.e0) > tol:
        raise InfeasibleScheduleError("initial state of charge does not match e0")
    step = soc[:-1] - pp / spec.eta + pm * spec.eta
    if np.any(np.abs(step - soc[1:]) > tol * max(1.0, spec.E)):
        bad = int(np.argmax(np.abs(step - soc[1:]))) + 1
        raise InfeasibleScheduleError(f"SoC dynamics violated at period {bad}")


def _allowed(p: float, P: float, g0: float, at_zero_lower: bool, tol: float):
    """Subgradient interval allowed by one box-constrained component.

    Interior requires g == g0. At a box face the free multiplier turns the
    equality into a one-sided bound whose direction depends on the face.
    """
    if p <= tol:
        return (g0, math.inf) if at_zero_lower else (-math.inf, g0)
    if p >= P - tol:
        return (-math.inf, g0) if at_zero_lower else (g0, math.inf)
    return g0, g0


def kkt_residuals(spec: StorageSpec, cost_source, term: TerminalCost,
                  schedule: Schedule, theta_trace=None,
                  power_tol: float = 1e-9) -> KktReport:
    """Residuals of the relaxed problem's KKT system at a candidate solution.

    ``theta_trace[t]`` is the SoC dual at the end of period t (T + 1 values);
    the dispatch of period t is tested against ``theta_trace[t - 1]``.
    Stationarity measures the gap between the cost's subgradient set at the
    net dispatch and the value forced by each interior component; a component
    sitting on a box face only bounds the subgradient, and a violated bound is
    reported as dual infeasibility (a negative box multiplier).

    ``power_tol`` widens each operating point to an interval of that radius:
    a component that close to a box face counts as sitting on it, and the
    subgradient is taken over the whole interval. With an approximate dual the
    controls trimmed onto an SoC bound stop a hair short of a power limit or a
    breakpoint, and without the widening the checker would report a box
    multiplier or a kink's subgradient spread as a stationarity error.
    """
    source = as_source(cost_source)
    theta = np.asarray(schedule.theta if theta_trace is None else theta_trace, dtype=float)
    T = len(source)
    if schedule.T != T or theta.size != T + 1:
        raise ValueError("schedule, dual trace and costs disagree on the horizon")
    if not np.all(np.isfinite(theta)):
        raise ValueError("dual trace must be finite")
    check_feasible(spec, schedule)
    eta, P, E = spec.eta, spec.P, spec.E
    stat = comp = infeas = 0.0
    worst, worst_val = 0, -1.0

    for t in range(T):
        pp = float(schedule.p_plus[t])
        pm = float(schedule.p_minus[t])
        x = float(theta[t])
        cost = source[t]
        s_res = d_res = 0.0
        # each component is stationary at its own signed operating point:
        # discharge o(p+) + x/eta + mu_hi - mu_lo = 0, charge -o(-p-) - x*eta + ... = 0
        for point, g0, zero_lower in ((pp, -x / eta, True), (-pm, -x * eta, False)):
            lo = cost.subgradient(max(point - power_tol, -P))[0]
            hi = cost.subgradient(min(point + power_tol, P))[1]
            c_lo, c_hi = _allowed(abs(point), P, g0, zero_lower, power_tol)
            miss = max(0.0, max(lo, c_lo) - min(hi, c_hi))
            if c_lo == c_hi:
                s_res = max(s_res, miss)
            else:
                d_res = max(d_res, miss)
        # a change in the SoC dual must be backed by an active SoC bound
        jump = float(theta[t + 1] - theta[t])
        e_t = float(schedule.soc[t + 1])
        c_res = jump * max(E - e_t, 0.0) if jump > 0 else -jump * max(e_t, 0.0)
        stat, comp, infeas = max(stat, s_res), max(comp, c_res), max(infeas, d_res)
        here = max(s_res, c_res, d_res)
        if here > worst_val:
            worst, worst_val = t + 1, here

    term_res = abs(float(theta[T]) + term.marginal(float(schedule.soc[-1])))
    stat = max(stat, term_res)
    if term_res > worst_val:
        worst = T + 1
    return KktReport(stat, comp, infeas, worst)


def marginal_scale(spec: StorageSpec, cost_source, term: TerminalCost) -> float:
    """Largest |marginal| over the power box and the terminal SoC range.

    KKT residuals are measured in marginal-cost units, so tolerances are
    quoted relative to this.
    """
    source = as_source(cost_source)
    scale = max(abs(term.marginal(0.0)), abs(term.marginal(spec.E)))
    for block in source.blocks():
        n = block_len(block)
        for p in (-spec.P, spec.P):
            scale = max(scale, float(np.max(np.abs(block_marginals(block, np.full(n, p))))))
    return scale
