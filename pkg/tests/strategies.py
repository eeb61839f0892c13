"""Hypothesis strategies shared across the test modules."""

import numpy as np
from hypothesis import strategies as st

from storage_lagrange import PiecewiseLinearCost, QuadraticCost, StorageSpec, TerminalCost

finite = dict(allow_nan=False, allow_infinity=False)


@st.composite
def quadratic_costs(draw, alpha=(1e-3, 10.0), beta=(-10.0, 10.0)):
    return QuadraticCost(draw(st.floats(*alpha, **finite)), draw(st.floats(*beta, **finite)))


@st.composite
def pwl_costs(draw, span=1.0, max_segments=8, c_range=(-50.0, 50.0)):
    """Convex PWL cost whose domain is exactly [-span, span]."""
    J = draw(st.integers(1, max_segments))
    c = sorted(draw(st.lists(st.floats(*c_range, **finite), min_size=J, max_size=J)))
    inner = sorted(set(draw(st.lists(st.floats(-0.99 * span, 0.99 * span, **finite),
                                     min_size=J - 1, max_size=J - 1))))
    q = inner + [span]
    c = c[:len(q)]
    return PiecewiseLinearCost(-span, c, q)


def costs(span=1.0):
    return st.one_of(quadratic_costs(), pwl_costs(span=span))


@st.composite
def storage_specs(draw, P=None):
    P = draw(st.floats(0.1, 2.0, **finite)) if P is None else P
    E = draw(st.floats(0.5, 8.0, **finite))
    eta = draw(st.floats(0.5, 1.0, **finite))
    e0 = draw(st.floats(0.0, 1.0, **finite)) * E
    return StorageSpec(P, E, eta, e0)


@st.composite
def terminals(draw, E=4.0):
    return TerminalCost(draw(st.floats(0.0, 5.0, **finite)), draw(st.floats(0.0, E, **finite)),
                        draw(st.floats(-5.0, 5.0, **finite)))


@st.composite
def instances(draw, T=(1, 12), pwl=True):
    """(spec, costs, terminal) with every PWL domain covering [-P, P]."""
    spec = draw(storage_specs(P=1.0))
    n = draw(st.integers(*T))
    kind = costs() if pwl else quadratic_costs()
    cs = draw(st.lists(kind, min_size=n, max_size=n))
    return spec, cs, draw(terminals(E=spec.E))


def rng_quadratic(rng: np.random.Generator, T: int):
    return [QuadraticCost(rng.uniform(1e-3, 10), rng.uniform(-10, 0)) for _ in range(T)]
