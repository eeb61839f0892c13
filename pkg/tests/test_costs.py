import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storage_lagrange import (
    DomainError,
    PiecewiseLinearCost,
    QuadraticCost,
    QuadraticSeries,
    TerminalCost,
    eval_cost,
    inverse_marginal,
    marginal,
    marginal_envelope,
    terminal_marginal,
)
from storage_lagrange.costs import (
    MixedSource,
    PiecewiseSeries,
    as_source,
    block_len,
    block_marginals,
)

from strategies import costs, finite, pwl_costs, quadratic_costs

CURVE = PiecewiseLinearCost(-1.0, [1.0, 3.0, 5.0], [0.0, 0.5, 1.0])


def test_quadratic_value():
    assert eval_cost(QuadraticCost(1.0, 0.0), 2.0) == 2.0


@pytest.mark.parametrize("alpha", [0.0, -1.0, math.nan, math.inf])
def test_quadratic_rejects_nonconvex(alpha):
    with pytest.raises(ValueError):
        QuadraticCost(alpha, 0.0)


def test_pwl_value_is_integral_from_domain_start():
    cost = PiecewiseLinearCost(-1.0, [1.0, 3.0], [0.0, 1.0])
    assert eval_cost(cost, 0.5) == pytest.approx(2.5)
    assert eval_cost(cost, -1.0) == 0.0


def test_pwl_value_outside_domain():
    with pytest.raises(DomainError):
        eval_cost(CURVE, 1.5)
    with pytest.raises(DomainError):
        marginal(CURVE, -1.01)


@pytest.mark.parametrize("p, expected", [(0.0, 3.0), (-0.5, 1.0), (0.5, 5.0), (1.0, 5.0), (-1.0, 1.0)])
def test_pwl_marginal_right_continuous(p, expected):
    assert marginal(CURVE, p) == expected


def test_quadratic_marginal():
    assert marginal(QuadraticCost(2.0, -1.0), 0.0) == 2.0


@pytest.mark.parametrize("x, expected", [(3.0, 0.5), (0.0, -1.0), (10.0, 1.0), (1.0, 0.0), (4.9, 0.5)])
def test_pwl_inverse_marginal(x, expected):
    assert inverse_marginal(CURVE, x) == expected


def test_quadratic_inverse_marginal():
    assert inverse_marginal(QuadraticCost(2.0, 0.0), 4.0) == 2.0


@pytest.mark.parametrize("kappa, e_ref, slope, e, expected", [
    (1.0, 4.0, 0.0, 3.0, -1.0),
    (0.0, 0.0, 0.0, 2.7, 0.0),
    (1.0, 4.0, 0.0, 4.0, 0.0),
    (0.0, 0.0, 2.0, 1.0, 2.0),
])
def test_terminal_marginal(kappa, e_ref, slope, e, expected):
    assert terminal_marginal(TerminalCost(kappa, e_ref, slope), e) == expected


def test_terminal_rejects_negative_curvature():
    with pytest.raises(ValueError):
        TerminalCost(-1.0)


@pytest.mark.parametrize("cost, eta, expected", [
    (QuadraticCost(1.0, 0.0), 1.0, (-1.0, 1.0)),
    (QuadraticCost(1.0, 0.0), 0.5, (-2.0, 2.0)),
    (CURVE, 1.0, (-5.0, 5.0)),
])
def test_marginal_envelope(cost, eta, expected):
    assert marginal_envelope([cost], TerminalCost(0.0), (1.0, 4.0), eta) == expected


def test_marginal_envelope_adds_terminal_and_checks_domain():
    lo, hi = marginal_envelope([QuadraticCost(1.0, 0.0)], TerminalCost(1.0, 4.0), (1.0, 4.0), 1.0)
    assert (lo, hi) == (-5.0, 5.0)
    with pytest.raises(DomainError):
        marginal_envelope([CURVE], TerminalCost(0.0), (2.0, 4.0), 1.0)
    with pytest.raises(ValueError):
        marginal_envelope([], TerminalCost(0.0), (1.0, 4.0), 1.0)


@pytest.mark.parametrize("c, q, q_lo", [
    ([3.0, 1.0], [0.0, 1.0], -1.0),      # not convex
    ([1.0, 3.0], [0.5, 0.5], -1.0),      # breakpoints not increasing
    ([1.0], [-2.0], -1.0),               # empty domain
    ([], [], -1.0),
])
def test_pwl_rejects_invalid_curves(c, q, q_lo):
    with pytest.raises(ValueError):
        PiecewiseLinearCost(q_lo, c, q)


def test_pwl_segments_round_trip():
    again = PiecewiseLinearCost.from_segments(CURVE.q_lo, CURVE.segments)
    assert again == CURVE


# --- properties ----------------------------------------------------------

@given(costs(), st.floats(-1, 1, **finite), st.floats(-1, 1, **finite))
def test_marginal_is_monotone(cost, a, b):
    lo, hi = sorted((a, b))
    assert marginal(cost, lo) <= marginal(cost, hi)


@given(costs(), st.floats(-100, 100, **finite), st.floats(-1, 1, **finite))
def test_inverse_marginal_is_a_sup(cost, x, y):
    phi = inverse_marginal(cost, x)
    lo, hi = cost.domain()
    assert lo <= phi <= hi
    # right-continuous marginals: the sup is approached from the left
    if y < phi:
        assert marginal(cost, y) <= x
    elif y > phi:
        assert marginal(cost, y) > x


@given(costs(), st.floats(-100, 100, **finite), st.floats(-100, 100, **finite))
def test_inverse_marginal_is_monotone(cost, a, b):
    lo, hi = sorted((a, b))
    assert inverse_marginal(cost, lo) <= inverse_marginal(cost, hi)


@given(quadratic_costs(), st.floats(-10, 10, **finite))
def test_quadratic_round_trip(cost, p):
    back = inverse_marginal(cost, marginal(cost, p))
    assert back == pytest.approx(p, rel=1e-12, abs=1e-12 * max(1.0, abs(cost.beta)))


@given(costs(), st.floats(0, 10, **finite))
def test_left_marginal_at_inverse_stays_below(cost, t):
    x = marginal(cost, cost.domain()[0] if isinstance(cost, PiecewiseLinearCost) else 0.0) + t
    assert cost.subgradient(inverse_marginal(cost, x))[0] <= x + 1e-12 * max(1.0, abs(x))


@given(pwl_costs(), st.floats(-1, 1, **finite), st.floats(-1, 1, **finite))
def test_pwl_value_is_convex_and_consistent(cost, a, b):
    lo, hi = sorted((a, b))
    mid = 0.5 * (lo + hi)
    assert eval_cost(cost, mid) <= 0.5 * (eval_cost(cost, lo) + eval_cost(cost, hi)) + 1e-9
    # the subgradient brackets secant slopes
    if hi - lo > 1e-6:
        slope = (eval_cost(cost, hi) - eval_cost(cost, lo)) / (hi - lo)
        assert cost.subgradient(lo)[0] - 1e-6 <= slope <= cost.subgradient(hi)[1] + 1e-6


@settings(max_examples=50)
@given(st.lists(costs(), min_size=1, max_size=20), st.integers(1, 7))
def test_sources_agree_with_costs(cs, block):
    src = as_source(cs)
    assert len(src) == len(cs)
    assert [src[t] for t in range(len(cs))] == cs
    got = np.concatenate([block_marginals(b, np.full(block_len(b), 0.3))
                          for b in src.blocks(block)])
    assert np.allclose(got, [marginal(c, 0.3) for c in cs])
    tail = src.window(len(cs) // 2)
    assert [tail[t] for t in range(len(tail))] == cs[len(cs) // 2:]


def test_source_types():
    assert isinstance(as_source([QuadraticCost(1, 0)] * 3), QuadraticSeries)
    assert isinstance(as_source([CURVE] * 3), PiecewiseSeries)
    mixed = as_source([CURVE, QuadraticCost(1, 0)])
    assert isinstance(mixed, MixedSource) and mixed.has_pwl
    assert not as_source([QuadraticCost(1, 0)]).has_pwl
