"""Compiled inner loops.

Everything here works on flat float64 arrays and allocates nothing in the
simulation paths, so a search over any horizon holds O(1) working state.
Piecewise-linear blocks are passed as (c, q, offsets, q_lo): the segments of
period i are ``c[offsets[i]:offsets[i+1]]`` with upper quantities ``q[...]``.
"""

import numpy as np
from numba import njit

# variant codes, mirrored by policy.PolicyVariant
RELAXED = 0
CHARGE_PREFERRING = 1
DISCHARGE_PREFERRING = 2

# simulation status codes
COMPLETED = 0
HIT_UPPER = 1
HIT_LOWER = 2

# stopping modes
MODE_CLASSIFY = 0  # stop at sigma >= E or sigma <= 0
MODE_PREFIX = 1  # stop at sigma > E or sigma < 0


@njit(cache=True, inline="always")
def _clamp(v, P):
    if v < 0.0:
        return 0.0
    if v > P:
        return P
    return v


@njit(cache=True, inline="always")
def _apply_variant(pp, pm, variant):
    if variant == CHARGE_PREFERRING and pm > 0.0:
        pp = 0.0
    elif variant == DISCHARGE_PREFERRING and pp > 0.0:
        pm = 0.0
    return pp, pm


@njit(cache=True, inline="always")
def _quad_dispatch(a, b, x, P, eta, variant):
    pp = _clamp(b - x / (eta * a), P)
    pm = _clamp(x * eta / a - b, P)
    return _apply_variant(pp, pm, variant)


@njit(cache=True, inline="always")
def _pwl_phi(c, q, start, stop, q_lo, w):
    # sup{y : o(y) <= w}; count of c[j] <= w by bisection (c sorted)
    lo = start
    hi = stop
    while lo < hi:
        mid = (lo + hi) >> 1
        if c[mid] <= w:
            lo = mid + 1
        else:
            hi = mid
    if lo == start:
        return q_lo
    return q[lo - 1]


@njit(cache=True, inline="always")
def _pwl_dispatch(c, q, start, stop, q_lo, x, P, eta, variant):
    pp = _clamp(_pwl_phi(c, q, start, stop, q_lo, -x / eta), P)
    pm = _clamp(-_pwl_phi(c, q, start, stop, q_lo, -x * eta), P)
    return _apply_variant(pp, pm, variant)


@njit(cache=True, inline="always")
def _crossed(sigma, E, mode):
    if mode == MODE_CLASSIFY:
        if sigma >= E:
            return HIT_UPPER
        if sigma <= 0.0:
            return HIT_LOWER
    else:
        if sigma > E:
            return HIT_UPPER
        if sigma < 0.0:
            return HIT_LOWER
    return COMPLETED


@njit(cache=True)
def simulate_quad(alpha, beta, P, E, eta, x, variant, sigma, mode,
                  record, out_pp, out_pm, out_sigma):
    """Run the policy over one quadratic block.

    Returns (status, index, sigma). On a crossing, index is the offending
    period within the block and sigma its (out-of-bounds) value.
    """
    n = alpha.shape[0]
    for i in range(n):
        pp, pm = _quad_dispatch(alpha[i], beta[i], x, P, eta, variant)
        sigma = sigma - pp / eta + pm * eta
        if record:
            out_pp[i] = pp
            out_pm[i] = pm
            out_sigma[i] = sigma
        status = _crossed(sigma, E, mode)
        if status != COMPLETED:
            return status, i, sigma
    return COMPLETED, n, sigma


@njit(cache=True)
def simulate_pwl(c, q, offsets, q_lo, P, E, eta, xa, xb, lam, variant, sigma,
                 mode, record, out_pp, out_pm, out_sigma):
    """Piecewise-linear counterpart of simulate_quad.

    The dispatch is ``(1 - lam) * pi(xa) + lam * pi(xb)``; with lam == 0
    only pi(xa) is evaluated.
    """
    n = q_lo.shape[0]
    for i in range(n):
        s = offsets[i]
        e = offsets[i + 1]
        pp, pm = _pwl_dispatch(c, q, s, e, q_lo[i], xa, P, eta, variant)
        if lam != 0.0:
            pp_b, pm_b = _pwl_dispatch(c, q, s, e, q_lo[i], xb, P, eta, variant)
            pp = (1.0 - lam) * pp + lam * pp_b
            pm = (1.0 - lam) * pm + lam * pm_b
        sigma = sigma - pp / eta + pm * eta
        if record:
            out_pp[i] = pp
            out_pm[i] = pm
            out_sigma[i] = sigma
        status = _crossed(sigma, E, mode)
        if status != COMPLETED:
            return status, i, sigma
    return COMPLETED, n, sigma


@njit(cache=True)
def pwl_dispatch_gap(c, q, offsets, q_lo, P, eta, xa, xb, variant):
    """Largest per-period change in (p_plus, p_minus) between two duals."""
    n = q_lo.shape[0]
    gap = 0.0
    for i in range(n):
        s = offsets[i]
        e = offsets[i + 1]
        pa, ma = _pwl_dispatch(c, q, s, e, q_lo[i], xa, P, eta, variant)
        pb, mb = _pwl_dispatch(c, q, s, e, q_lo[i], xb, P, eta, variant)
        d = abs(pa - pb) + abs(ma - mb)
        if d > gap:
            gap = d
    return gap


@njit(cache=True)
def pwl_marginal_at(c, q, offsets, p):
    """Right-continuous marginal of each period at p[i]."""
    n = offsets.shape[0] - 1
    out = np.empty(n)
    for i in range(n):
        s = offsets[i]
        e = offsets[i + 1]
        lo = s
        hi = e
        while lo < hi:
            mid = (lo + hi) >> 1
            if q[mid] <= p[i]:
                lo = mid + 1
            else:
                hi = mid
        if lo == e:
            lo = e - 1
        out[i] = c[lo]
    return out


@njit(cache=True)
def pwl_value_at(c, q, offsets, q_lo, p):
    """Integral of the step marginal from q_lo to p[i], per period."""
    n = offsets.shape[0] - 1
    out = np.empty(n)
    for i in range(n):
        left = q_lo[i]
        total = 0.0
        for j in range(offsets[i], offsets[i + 1]):
            if p[i] <= left:
                break
            right = q[j] if q[j] < p[i] else p[i]
            total += c[j] * (right - left)
            left = q[j]
        out[i] = total
    return out
