import math

import numpy as np
import pytest
from hypothesis import given, settings

from storage_lagrange import (
    Classification,
    ConvergenceError,
    OutcomeKind,
    PolicyVariant,
    QuadraticCost,
    SearchConfig,
    SimOutcome,
    StorageSpec,
    TerminalCost,
    check_feasible,
    classify,
    dp_solve,
    policy_dispatch,
    simulate,
    solve,
    solve_bounds,
    solve_horizon,
    warm_control,
)

from strategies import instances, rng_quadratic

EPS = 1e-3
SPEC = StorageSpec(P=1.0, E=4.0, eta=1.0, e0=2.0)
COST = [QuadraticCost(1.0, 0.0)]
TERM = TerminalCost(1.0, 4.0)


@pytest.mark.parametrize("outcome, expected", [
    (SimOutcome(OutcomeKind.HIT_UPPER, 15, 5.0), Classification.ABOVE_OR_EQUAL),
    (SimOutcome(OutcomeKind.HIT_LOWER, 9, -1.0), Classification.BELOW_OR_EQUAL),
    (SimOutcome(OutcomeKind.COMPLETED, 1, 3.0), Classification.EQUAL),
    (SimOutcome(OutcomeKind.COMPLETED, 1, 3.5), Classification.ABOVE_OR_EQUAL),
    (SimOutcome(OutcomeKind.COMPLETED, 1, 2.5), Classification.BELOW_OR_EQUAL),
])
def test_classify(outcome, expected):
    assert classify(1.0, outcome, TERM) is expected


def test_single_period_analytic():
    sol = solve(SPEC, COST, TERM, SearchConfig(epsilon=EPS))
    assert abs(sol.theta - 1.0) <= EPS
    assert sol.first_control.net == pytest.approx(-1.0, abs=EPS)
    lo, hi = sol.bracket
    assert hi - lo < EPS and sol.theta == 0.5 * (lo + hi)


def test_no_terminal_incentive():
    sol = solve(SPEC, COST, TerminalCost(0.0), SearchConfig(epsilon=EPS))
    assert abs(sol.theta) <= EPS
    assert sol.first_control.net == pytest.approx(0.0, abs=EPS)


def test_two_period_bracketing():
    spec = StorageSpec(1.0, 1.0, 1.0, 1.0)
    cs = [QuadraticCost(1.0, -10.0)] * 2
    term = TerminalCost(1.0, 0.5)
    sol = solve(spec, cs, term, SearchConfig(epsilon=EPS))
    below = classify(sol.theta - EPS, simulate(spec, cs, sol.theta - EPS), term)
    above = classify(sol.theta + EPS, simulate(spec, cs, sol.theta + EPS), term)
    assert below is not Classification.ABOVE_OR_EQUAL
    assert above is Classification.ABOVE_OR_EQUAL
    # the bound is active at the first period, so the control is clamped
    assert sol.prefix_len == 0 and sol.clamped
    assert sol.first_control.p_minus == 0.0


def test_iteration_bound_and_cap():
    rng = np.random.default_rng(1)
    cs = rng_quadratic(rng, 48)
    spec = StorageSpec(1.0, 4.0, 0.92, 2.0)
    cfg = SearchConfig(epsilon=EPS)
    sol = solve(spec, cs, TERM, cfg)
    lo, hi = sol.search_range
    assert sol.iterations <= math.ceil(math.log2((hi - lo) / EPS)) + 1
    with pytest.raises(ValueError):
        solve(spec, cs, TERM, SearchConfig(epsilon=EPS, max_iterations=3))


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SearchConfig(range=(1.0, 1.0))


def test_range_override_missing_the_dual_does_not_loop():
    sol = solve(SPEC, COST, TERM, SearchConfig(range=(5.0, 6.0)))
    assert sol.bracket[0] == 5.0 and sol.theta < 5.0 + EPS


def test_positive_dual_range_flag():
    sol = solve(SPEC, COST, TERM, SearchConfig(positive_dual_range=True))
    assert sol.search_range[0] == 0.0 and abs(sol.theta - 1.0) <= EPS


def test_bounds_coincide_without_simultaneous_dispatch():
    res = solve_bounds(SPEC, [QuadraticCost(1.0, 0.5)] * 6, TERM)
    assert res.theta_lo == res.theta_hi
    assert res.p_lo == res.p_hi


def test_bounds_on_generation_tracking_family():
    spec = StorageSpec(1.0, 4.0, 0.92, 2.0)
    for seed in range(10):
        cs = rng_quadratic(np.random.default_rng(seed), 24)
        res = solve_bounds(spec, cs, TerminalCost(0.5, 2.0))
        relaxed = solve(spec, cs, TerminalCost(0.5, 2.0)).theta
        assert res.theta_lo <= res.theta_hi + 2 * EPS
        assert res.theta_lo - EPS <= relaxed <= res.theta_hi + EPS
        assert res.p_lo <= res.p_hi + 1e-9


def test_warm_control_follows_prefix():
    spec = StorageSpec(1.0, 100.0, 0.95, 50.0)
    cs = rng_quadratic(np.random.default_rng(2), 20)
    sol = solve(spec, cs, TerminalCost(0.1, 50.0))
    assert sol.prefix_len == 20  # never touches a bound: one solve serves all
    for t in range(1, 21):
        d = warm_control(spec, cs, TerminalCost(0.1, 50.0), sol, t)
        assert d.p_plus == pytest.approx(sol.prefix_p_plus[t - 1])
        assert d.p_minus == pytest.approx(sol.prefix_p_minus[t - 1])
    assert warm_control(spec, cs, TerminalCost(0.1, 50.0), sol, 21) is None


def test_warm_control_signals_resolve_at_crossing():
    spec = StorageSpec(1.0, 1.0, 1.0, 1.0)
    cs = [QuadraticCost(1.0, -10.0)] * 3
    sol = solve(spec, cs, TerminalCost(1.0, 0.5))
    assert warm_control(spec, cs, TerminalCost(1.0, 0.5), sol, sol.prefix_len + 1) is None


def test_horizon_analytic():
    sched = solve_horizon(SPEC, COST, TERM)
    assert sched.net[0] == pytest.approx(-1.0, abs=EPS)
    assert sched.soc[1] == pytest.approx(3.0, abs=EPS)
    assert sched.objective == pytest.approx(1.0, abs=2 * EPS)


def test_horizon_matches_interior_single_solve():
    spec = StorageSpec(1.0, 100.0, 0.95, 50.0)
    cs = rng_quadratic(np.random.default_rng(2), 20)
    term = TerminalCost(0.1, 50.0)
    sol = solve(spec, cs, term)
    sched = solve_horizon(spec, cs, term)
    assert sched.solves == 1
    np.testing.assert_allclose(sched.p_plus, sol.prefix_p_plus)
    np.testing.assert_allclose(sched.p_minus, sol.prefix_p_minus)


def test_horizon_rejects_empty():
    with pytest.raises(ValueError):
        solve_horizon(SPEC, [], TERM)


@settings(max_examples=60, deadline=None)
@given(instances(T=(1, 10)))
def test_horizon_is_feasible_and_no_worse_than_dp(inst):
    spec, cs, term = inst
    sched = solve_horizon(spec, cs, term)
    check_feasible(spec, sched)
    assert sched.theta[-1] == -term.marginal(sched.soc[-1])
    # the grid schedule is feasible for the relaxation, so a fine dual
    # accuracy must not do worse; dispatch error is the dual error times
    # the slope of the inverse marginal, which flat costs make large
    fine = 1e-9
    sched = solve_horizon(spec, cs, term, SearchConfig(epsilon=fine))
    dp = dp_solve(spec, cs, term)
    slack = 2 * sched.T * fine * spec.P / spec.eta * 1e3 + 1e-9 * (1 + abs(dp.objective))
    assert sched.objective <= dp.objective + slack


@settings(max_examples=60, deadline=None)
@given(instances(T=(1, 10), pwl=False))
def test_first_control_is_policy_at_committed_dual(inst):
    spec, cs, term = inst
    sol = solve(spec, cs, term)
    if sol.prefix_len > 0:
        assert abs(sol.commit_dual - sol.theta) <= EPS / 2
        assert policy_dispatch(spec, cs[0], sol.commit_dual) == sol.first_control
        if sol.prefix_len == len(cs):
            assert sol.commit_dual == sol.theta


def test_non_convergence_is_reported():
    # the terminal marginal overflows, leaving no finite range to bisect
    with pytest.raises(ConvergenceError):
        solve(SPEC, COST, TerminalCost(1e308, -1e308))
