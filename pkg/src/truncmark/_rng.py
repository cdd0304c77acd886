"""Counter-based random streams for reproducible parallel noise sampling.

Each (seed, view, row, col) tuple owns an independent substream, so photon
noise is bitwise identical for any worker count and any evaluation order.
Poisson variates use Atkinson's logistic-envelope rejection method for large
means and exact CDF inversion below mean 10.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@numba.njit(numba.uint64(numba.uint64), cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(numba.uint64(numba.uint64, numba.uint64, numba.uint64, numba.uint64),
            cache=True)
def stream_state(seed, view, row, col):
    s = _mix64(seed + _GOLDEN)
    s = _mix64(s ^ (view + _GOLDEN))
    s = _mix64(s ^ (row + _GOLDEN))
    s = _mix64(s ^ (col + _GOLDEN))
    return s


@numba.njit(cache=True, inline="always")
def next_uniform(state):
    """Advance a splitmix64 stream; returns (new_state, u) with u in (0, 1)."""
    state = state + _GOLDEN
    bits = _mix64(state)
    u = (np.float64(bits >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
    return state, u


@numba.njit(cache=True)
def poisson_inversion(state, lam):
    """Exact CDF inversion, suitable for small means."""
    state, u = next_uniform(state)
    p = math.exp(-lam)
    cum = p
    k = 0
    while u > cum and k < 400:
        k += 1
        p *= lam / k
        cum += p
    return state, k


@numba.njit(cache=True)
def poisson_rejection(state, lam):
    """Atkinson's rejection method with a logistic envelope (mean >= ~10)."""
    c = 0.767 - 3.36 / lam
    beta = math.pi / math.sqrt(3.0 * lam)
    alpha = beta * lam
    k = math.log(c) - lam - math.log(beta)
    log_lam = math.log(lam)
    while True:
        state, u1 = next_uniform(state)
        s = math.log((1.0 - u1) / u1)  # logit; alpha - beta*x = s
        x = (alpha - s) / beta
        n = math.floor(x + 0.5)
        if n < 0:
            continue
        state, u2 = next_uniform(state)
        softplus = max(s, 0.0) + math.log1p(math.exp(-abs(s)))
        lhs = s + math.log(u2) - 2.0 * softplus
        rhs = k + n * log_lam - math.lgamma(n + 1.0)
        if lhs <= rhs:
            return state, np.int64(n)


@numba.njit(cache=True)
def poisson_sample(state, lam):
    if lam <= 0.0:
        return state, np.int64(0)
    if lam < 10.0:
        return poisson_inversion(state, lam)
    return poisson_rejection(state, lam)


@numba.njit(cache=True, parallel=True)
def poisson_log_domain(line_integrals, photons, seed, out):
    """Photon-count noise on log-domain data.

    For every pixel p: k ~ Poisson(N0 * exp(-p)) from its own substream,
    output -ln(max(k, 1) / N0). Shapes (views, rows, cols).
    """
    views, rows, cols = line_integrals.shape
    for v in numba.prange(views):
        for r in range(rows):
            for c in range(cols):
                lam = photons * math.exp(-line_integrals[v, r, c])
                state = stream_state(
                    np.uint64(seed), np.uint64(v), np.uint64(r), np.uint64(c)
                )
                state, k = poisson_sample(state, lam)
                if k < 1:
                    k = 1
                out[v, r, c] = -math.log(k / photons)
