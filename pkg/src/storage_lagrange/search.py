"""Binary search on the SoC dual and primal recovery from it."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels
from .costs import (
    DEFAULT_BLOCK,
    PwlBlock,
    QuadraticCost,
    TerminalCost,
    as_source,
    check_block_domain,
    marginal_envelope,
)
from .policy import (
    Dispatch,
    OutcomeKind,
    PolicyVariant,
    SimOutcome,
    StorageSpec,
    _outcome,
    policy_dispatch,
    run_blocks,
)
from .schedule import Schedule, objective_of

log = logging.getLogger(__name__)

# tolerance on the per-period dispatch jump across the final bracket above
# which piecewise-linear periods are treated as set-valued
DEGENERATE_GAP = 1e-9
_MIX_ITERATIONS = 60


class ConvergenceError(RuntimeError):
    """The bisection did not close its bracket within the iteration cap."""


class Classification(enum.Enum):
    ABOVE_OR_EQUAL = "above"
    BELOW_OR_EQUAL = "below"
    EQUAL = "equal"


@dataclass(frozen=True)
class SearchConfig:
    epsilon: float = 1e-3
    range: Optional[tuple[float, float]] = None
    max_iterations: Optional[int] = None
    # use L = 0, R = max o/eta (assumes a non-negative storage value)
    positive_dual_range: bool = False
    collect_prefix: bool = True
    # split set-valued piecewise-linear dispatch across the final bracket
    resolve_degenerate: bool = True
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.range is not None and not self.range[0] < self.range[1]:
            raise ValueError(f"search range must satisfy L < R, got {self.range}")

    def required_iterations(self, lo: float, hi: float) -> int:
        if hi - lo < self.epsilon:
            return 0
        return math.ceil(math.log2((hi - lo) / self.epsilon)) + 1


@dataclass
class DualSolution:
    theta: float
    first_control: Dispatch
    prefix_len: int
    iterations: int
    bracket: tuple[float, float]
    kind: OutcomeKind  # outcome of the final simulation at theta
    variant: PolicyVariant = PolicyVariant.RELAXED
    mix: float = 0.0  # weight on the bracket's upper end for PWL periods
    clamped: bool = False
    prefix_p_plus: Optional[np.ndarray] = None
    prefix_p_minus: Optional[np.ndarray] = None
    prefix_soc: Optional[np.ndarray] = None
    search_range: tuple[float, float] = (float("nan"), float("nan"))
    # (status, 1-based period) of the non-strict exit at each bracket end
    exits: tuple = ()
    # extra bisection steps below epsilon, see _refine_split
    refinements: int = 0
    # (xa, xb, weight) the prefix was dispatched at; see ``commit_dual``
    commit: tuple = ()

    @property
    def commit_dual(self) -> float:
        """Dual the committed prefix is stationary for."""
        if not self.commit:
            return self.theta
        xa, xb, w = self.commit
        return xa if xb is None else self.theta


@dataclass(frozen=True)
class BoundsResult:
    theta_lo: float
    theta_hi: float
    p_lo: float
    p_hi: float
    charge_preferring: DualSolution
    discharge_preferring: DualSolution


def classify(x: float, outcome: SimOutcome, term: TerminalCost) -> Classification:
    if outcome.kind is OutcomeKind.HIT_UPPER:
        return Classification.ABOVE_OR_EQUAL
    if outcome.kind is OutcomeKind.HIT_LOWER:
        return Classification.BELOW_OR_EQUAL
    target = -term.marginal(outcome.sigma)
    if x > target:
        return Classification.ABOVE_OR_EQUAL
    if x < target:
        return Classification.BELOW_OR_EQUAL
    return Classification.EQUAL


def _classify_raw(x: float, status: int, sigma: float, term: TerminalCost) -> Classification:
    if status == _kernels.HIT_UPPER:
        return Classification.ABOVE_OR_EQUAL
    if status == _kernels.HIT_LOWER:
        return Classification.BELOW_OR_EQUAL
    target = -term.marginal(sigma)
    if x > target:
        return Classification.ABOVE_OR_EQUAL
    if x < target:
        return Classification.BELOW_OR_EQUAL
    return Classification.EQUAL


def search_range(spec: StorageSpec, source, term: TerminalCost, cfg: SearchConfig):
    """Initial (L, R); also validates every cost domain against [-P, P]."""
    lo, hi = marginal_envelope(source, term, (spec.P, spec.E), spec.eta)
    if cfg.range is not None:
        return tuple(cfg.range)
    if cfg.positive_dual_range:
        return 0.0, max(hi - max(abs(term.marginal(0.0)), abs(term.marginal(spec.E))), cfg.epsilon)
    return lo, hi


def _has_pwl(source) -> bool:
    return source.has_pwl


def _dispatch_gap(spec, source, lo, hi, variant, block_size) -> float:
    gap = 0.0
    for b in source.blocks(block_size):
        if isinstance(b, PwlBlock):
            gap = max(gap, _kernels.pwl_dispatch_gap(
                b.c, b.q, b.offsets, b.q_lo, spec.P, spec.eta, lo, hi, int(variant)))
        del b
    return gap


def _resolve_mix(spec, source, term, lo, hi, variant, block_size) -> tuple[float, float]:
    """Bracket on the weight of pi(hi) for PWL periods that balances the classification."""
    mid = 0.5 * (lo + hi)
    a, b = 0.0, 1.0
    for _ in range(_MIX_ITERATIONS):
        lam = 0.5 * (a + b)
        status, _, sigma, _ = run_blocks(
            spec, source, lo, int(variant), xb=hi, lam=lam,
            block_size=block_size, check_domain=False)
        cls = _classify_raw(mid, status, sigma, term)
        if cls is Classification.EQUAL:
            return lam, lam
        if cls is Classification.ABOVE_OR_EQUAL:
            b = lam
        else:
            a = lam
        if b - a < 1e-15:
            break
    return a, b


def _mixed_dispatch(spec, cost, lo, hi, lam, variant) -> Dispatch:
    if lam == 0.0 or isinstance(cost, QuadraticCost):
        x = lo if lam == 0.0 else 0.5 * (lo + hi)
        return policy_dispatch(spec, cost, x, variant)
    da = policy_dispatch(spec, cost, lo, variant)
    db = policy_dispatch(spec, cost, hi, variant)
    return Dispatch((1 - lam) * da.p_plus + lam * db.p_plus,
                    (1 - lam) * da.p_minus + lam * db.p_minus)


def _land_on(spec: StorageSpec, d: Dispatch, target: float) -> Dispatch:
    """Adjust a dispatch so the post-step SoC equals ``target``.

    Overshoot trims charging first, then adds discharge; undershoot trims
    discharging first, then adds charge.
    """
    e, eta, P = spec.e0, spec.eta, spec.P
    sigma = e - d.p_plus / eta + d.p_minus * eta
    pp, pm = d.p_plus, d.p_minus
    if sigma > target:
        pm = (target - e + pp / eta) / eta
        if pm < 0.0:
            pm = 0.0
            pp = min(eta * (e - target), P)
    elif sigma < target:
        pp = eta * (e + pm * eta - target)
        if pp < 0.0:
            pp = 0.0
            pm = min((target - e) / eta, P)
    return Dispatch(pp, pm)


def _land_between(spec: StorageSpec, cost, lo: float, hi: float, target: float,
                  variant) -> Dispatch:
    """Dispatch on the policy path between duals ``lo`` and ``hi`` that ends
    the step exactly on ``target``.

    The post-step SoC is monotone in the dual, so the crossing is bracketed
    by bisection and the two sides are mixed linearly, which also covers the
    jumps of piecewise-linear dispatch. Falls back to trimming the nearer end
    when the target lies outside what the bracket can reach.
    """
    def step(x):
        d = policy_dispatch(spec, cost, x, variant)
        return d, spec.e0 - d.p_plus / spec.eta + d.p_minus * spec.eta

    d_lo, s_lo = step(lo)
    d_hi, s_hi = step(hi)
    if target <= s_lo:
        return _land_on(spec, d_lo, target)
    if target >= s_hi:
        return _land_on(spec, d_hi, target)
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if not a < mid < b:
            break
        d_mid, s_mid = step(mid)
        if s_mid < target:
            a, d_lo, s_lo = mid, d_mid, s_mid
        else:
            b, d_hi, s_hi = mid, d_mid, s_mid
    w = 0.0 if s_hi == s_lo else (target - s_lo) / (s_hi - s_lo)
    d = Dispatch((1 - w) * d_lo.p_plus + w * d_hi.p_plus,
                 (1 - w) * d_lo.p_minus + w * d_hi.p_minus)
    return _land_on(spec, d, target)


def _landing_target(spec: StorageSpec, d: Dispatch, exits, tau: int) -> float:
    """The SoC bound that period ``tau`` lands on, starting from ``spec.e0``."""
    sigma = spec.e0 - d.p_plus / spec.eta + d.p_minus * spec.eta
    if sigma > spec.E:
        return spec.E
    if sigma < 0.0:
        return 0.0
    up = any(st == _kernels.HIT_UPPER and t == tau for st, t in exits)
    down = any(st == _kernels.HIT_LOWER and t == tau for st, t in exits)
    if up != down:
        return spec.E if up else 0.0
    return spec.E if spec.E - sigma < sigma else 0.0


def _refine_split(spec, source, term, L, R, v, block_size, epsilon, limit=64):
    """Keep bisecting below epsilon while the bracket ends disagree.

    The ends disagree when they leave [0, E] differently (another period,
    another bound, or not at all), or when both complete but the terminal
    marginals they imply differ by more than epsilon. The first bound event
    decides the certified prefix and the bound the next period lands on, and
    the terminal marginal closes the dual trace, so an epsilon-wide bracket
    is too coarse when dispatch is steep in the dual. The loop stops once the
    ends agree or the bracket stops shrinking, in which case the optimum sits
    on the event itself. Usually no step is taken.
    """
    def probe(x):
        status, tau, sigma, _ = run_blocks(spec, source, x, v, mode=_kernels.MODE_CLASSIFY,
                                           block_size=block_size, check_domain=False)
        return status, tau, sigma

    def agree(a, b):
        if a[:2] != b[:2]:
            return False
        if a[0] != _kernels.COMPLETED:
            return True
        return abs(term.marginal(a[2]) - term.marginal(b[2])) <= epsilon

    steps = 0
    lo, hi = probe(L), probe(R)
    while steps < limit and not agree(lo, hi):
        x = 0.5 * (L + R)
        if not L < x < R:
            break
        mid = probe(x)
        steps += 1
        cls = _classify_raw(x, mid[0], mid[2], term)
        if cls is Classification.EQUAL:
            return x, x, steps
        if cls is Classification.ABOVE_OR_EQUAL:
            R, hi = x, mid
        else:
            L, lo = x, mid
    return L, R, steps


def _touch_dual(spec, source, L, R, v, cut, upper, block_size, limit=64):
    """Dual in [L, R] nearest the point where period ``cut`` first reaches
    the upper (or lower) bound; the emulated SoC there is monotone in x."""
    want = _kernels.HIT_UPPER if upper else _kernels.HIT_LOWER

    def reached(x):
        return _exit(spec, source, x, v, block_size) == (want, cut)

    if upper and reached(L):
        return L
    if not upper and reached(R):
        return R
    a, b = L, R
    for _ in range(limit):
        x = 0.5 * (a + b)
        if not a < x < b:
            break
        if reached(x) == upper:
            b = x
        else:
            a = x
    return b if upper else a


def _exit(spec, source, xa, variant, block_size, xb=None, lam=0.0):
    status, tau, sigma, _ = run_blocks(
        spec, source, xa, variant, mode=_kernels.MODE_CLASSIFY, xb=xb, lam=lam,
        block_size=block_size, check_domain=False)
    return status, tau


def solve(spec: StorageSpec, cost_source, term: TerminalCost,
          cfg: SearchConfig = SearchConfig(),
          variant: PolicyVariant = PolicyVariant.RELAXED) -> DualSolution:
    """Bisect for the initial SoC dual and recover the first control(s)."""
    source = as_source(cost_source)
    T = len(source)
    if T == 0:
        raise ValueError("need at least one period")
    if cfg.range is not None:
        for block in source.blocks(cfg.block_size):
            check_block_domain(block, -spec.P, spec.P)
        L, R = cfg.range
    else:
        L, R = search_range(spec, source, term, cfg)
    if not (math.isfinite(L) and math.isfinite(R)):
        raise ConvergenceError(f"search range is not finite: ({L}, {R})")
    needed = cfg.required_iterations(L, R)
    cap = cfg.max_iterations if cfg.max_iterations is not None else needed + 1
    if cap < needed + 1:
        raise ValueError(
            f"max_iterations={cap} leaves no slack over the {needed} bisection steps required")
    initial = (L, R)
    iterations = 0
    v = int(variant)
    while R - L >= cfg.epsilon:
        if iterations >= cap:
            raise ConvergenceError(
                f"bracket [{L}, {R}] still wider than {cfg.epsilon} after {iterations} steps")
        x = 0.5 * (L + R)
        status, _, sigma, _ = run_blocks(spec, source, x, v, block_size=cfg.block_size,
                                         check_domain=False)
        iterations += 1
        cls = _classify_raw(x, status, sigma, term)
        if cls is Classification.EQUAL:
            L = R = x
        elif cls is Classification.ABOVE_OR_EQUAL:
            R = x
        else:
            L = x
    L, R, refinements = _refine_split(spec, source, term, L, R, v, cfg.block_size,
                                         cfg.epsilon)
    theta = 0.5 * (L + R)

    lam = 0.0
    ends = [(L, None, 0.0), (R, None, 0.0)]
    if (cfg.resolve_degenerate and R > L and _has_pwl(source)
            and _dispatch_gap(spec, source, L, R, variant, cfg.block_size) > DEGENERATE_GAP):
        lam_a, lam_b = _resolve_mix(spec, source, term, L, R, variant, cfg.block_size)
        lam = 0.5 * (lam_a + lam_b)
        ends = [(L, R, lam_a), (L, R, lam_b)]
        log.debug("degenerate dual bracket [%g, %g]; mix weight %g", L, R, lam)

    if lam == 0.0:
        status, tau, sigma, chunks = run_blocks(
            spec, source, theta, v, mode=_kernels.MODE_PREFIX,
            record=cfg.collect_prefix, block_size=cfg.block_size, check_domain=False)
    else:
        status, tau, sigma, chunks = run_blocks(
            spec, source, L, v, xb=R, lam=lam, mode=_kernels.MODE_PREFIX,
            record=cfg.collect_prefix, block_size=cfg.block_size, check_domain=False)
    final = _outcome(status, tau, sigma, chunks)

    # certified prefix: SoC stays strictly inside (0, E) for every dual in the
    # bracket; an exact touch at either end counts as an active bound
    # (sigma is monotone in the dual, so the two ends suffice)
    prefix_len = final.prefix_len
    end_exits = []
    for xa, xb, w in ends:
        st, tau_e = _exit(spec, source, xa, v, cfg.block_size, xb, w)
        end_exits.append((st, tau_e))
        if st != _kernels.COMPLETED:
            prefix_len = min(prefix_len, tau_e - 1)

    # a prefix cut at period k + 1 is committed at the dual inside the bracket
    # where that period first reaches the bound: with the bound active there
    # the dual is constant through k + 1, and the midpoint can stop short by
    # more than period k + 1 can make up when dispatch is steep in the dual
    commit = (theta, None, 0.0) if lam == 0.0 else (L, R, lam)
    if 0 < prefix_len < T:
        cut = prefix_len + 1
        low = end_exits[0] == (_kernels.HIT_LOWER, cut)
        high = end_exits[1] == (_kernels.HIT_UPPER, cut)
        if low != high:
            if lam == 0.0:
                x_touch = _touch_dual(spec, source, L, R, v, cut, high, cfg.block_size)
                commit = (x_touch, None, 0.0)
            else:
                commit = ends[0] if low else ends[1]
            if cfg.collect_prefix:
                xa, xb, w = commit
                _, _, _, chunks = run_blocks(
                    spec, source, xa, v, xb=xb, lam=w, mode=_kernels.MODE_PREFIX,
                    record=True, block_size=cfg.block_size, check_domain=False)
                final = _outcome(status, tau, sigma, chunks)
    xa, xb, w = commit
    first = _mixed_dispatch(spec, source[0], xa, xa if xb is None else xb, w, variant)
    clamped = False
    if prefix_len == 0:
        target = _landing_target(spec, first, end_exits, 1)
        first = _land_between(spec, source[0], L, R, target, variant)
        clamped = True

    sol = DualSolution(
        theta=theta, first_control=first, prefix_len=prefix_len,
        iterations=iterations, refinements=refinements, bracket=(L, R), kind=final.kind, variant=variant,
        mix=lam, clamped=clamped, search_range=initial,
        exits=tuple(end_exits), commit=commit)
    if cfg.collect_prefix:
        sol.prefix_p_plus = final.p_plus[:prefix_len]
        sol.prefix_p_minus = final.p_minus[:prefix_len]
        sol.prefix_soc = final.soc[:prefix_len]
    return sol


def solve_bounds(spec: StorageSpec, cost_source, term: TerminalCost,
                 cfg: SearchConfig = SearchConfig()) -> BoundsResult:
    """Dual and first-control bounds when charge and discharge may not overlap.

    Charge-preferring simulation lifts the SoC trace and so gives the lower
    dual; discharge-preferring gives the upper one. Net dispatch decreases in
    the dual, so the control bounds pair each variant with the opposite dual.
    """
    source = as_source(cost_source)
    sub_cfg = replace(cfg, collect_prefix=False)
    charge = solve(spec, source, term, sub_cfg, PolicyVariant.CHARGE_PREFERRING)
    discharge = solve(spec, source, term, sub_cfg, PolicyVariant.DISCHARGE_PREFERRING)
    theta_lo, theta_hi = charge.theta, discharge.theta
    first = source[0]
    p_lo = policy_dispatch(spec, first, theta_hi, PolicyVariant.CHARGE_PREFERRING).net
    p_hi = policy_dispatch(spec, first, theta_lo, PolicyVariant.DISCHARGE_PREFERRING).net
    log.debug(
        "own-dual pairing: charge-preferring net %.6g at %.6g, discharge-preferring net %.6g at %.6g",
        policy_dispatch(spec, first, theta_lo, PolicyVariant.CHARGE_PREFERRING).net, theta_lo,
        policy_dispatch(spec, first, theta_hi, PolicyVariant.DISCHARGE_PREFERRING).net, theta_hi)
    return BoundsResult(theta_lo, theta_hi, p_lo, p_hi, charge, discharge)


def warm_control(spec: StorageSpec, cost_source, term: TerminalCost,
                 prev: DualSolution, t: int) -> Optional[Dispatch]:
    """Dispatch for period t (1-based) reusing ``prev``'s dual, or None.

    None means the emulated SoC left [0, E] at or before t and the problem
    has to be solved again from the current state.
    """
    if t < 1 or t > prev.prefix_len:
        return None
    source = as_source(cost_source)
    if prev.commit:
        xa, xb, w = prev.commit
        return _mixed_dispatch(spec, source[t - 1], xa, xa if xb is None else xb, w, prev.variant)
    lo, hi = prev.bracket
    x = lo if prev.mix else prev.theta
    return _mixed_dispatch(spec, source[t - 1], x, hi, prev.mix, prev.variant)


def solve_horizon(spec: StorageSpec, cost_source, term: TerminalCost,
                  cfg: SearchConfig = SearchConfig(),
                  variant: PolicyVariant = PolicyVariant.RELAXED) -> Schedule:
    """Optimal trajectory over the whole horizon by prefix decomposition.

    Each solve commits the leading periods whose emulated SoC stays strictly
    inside (0, E) across the whole dual bracket, then lands the next period on
    the bound the bracket touched. The tail is solved again from that bound,
    so the dual trace only moves where an SoC constraint is active.
    """
    source = as_source(cost_source)
    T = len(source)
    if T == 0:
        raise ValueError("need at least one period")
    sub_cfg = replace(cfg, collect_prefix=True)
    p_plus = np.empty(T)
    p_minus = np.empty(T)
    soc = np.empty(T + 1)
    theta = np.empty(T + 1)
    soc[0] = spec.e0
    t0 = 0
    e = spec.e0
    solves = 0
    while t0 < T:
        sub_spec = spec.replace_e0(e)
        sol = solve(sub_spec, source.window(t0), term, sub_cfg, variant)
        solves += 1
        k = sol.prefix_len
        if k > 0:
            p_plus[t0:t0 + k] = sol.prefix_p_plus
            p_minus[t0:t0 + k] = sol.prefix_p_minus
            soc[t0 + 1:t0 + k + 1] = sol.prefix_soc
            theta[t0:t0 + k] = sol.commit_dual
            t0 += k
            e = float(soc[t0])
        if t0 == T:
            break
        # the period after the prefix lands on the bound its bracket touched;
        # the dual stays in force through the landing and only moves once the
        # state sits on that bound
        here = spec.replace_e0(e)
        lo, hi = sol.bracket
        xa, xb, w = sol.commit
        d = _mixed_dispatch(here, source[t0], xa, xa if xb is None else xb, w, variant)
        target = _landing_target(here, d, sol.exits, k + 1)
        d = _land_between(here, source[t0], lo, hi, target, variant)
        p_plus[t0], p_minus[t0] = d.p_plus, d.p_minus
        theta[t0] = sol.commit_dual
        sigma = e - d.p_plus / spec.eta + d.p_minus * spec.eta
        # the trim lands on the bound up to rounding
        soc[t0 + 1] = min(max(sigma, 0.0), spec.E)
        t0 += 1
        e = float(soc[t0])
    # terminal stationarity; any gap to the last dual sits on an active bound
    theta[T] = -term.marginal(float(soc[T]))
    sched = Schedule(p_plus, p_minus, soc, theta, solves=solves)
    sched.objective = objective_of(spec, source, term, sched)
    return sched
