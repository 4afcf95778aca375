"""Compiled hot loops for the count sampler.

All arrays are index-addressed. ``counts1`` is ``(N1, M)`` with the row
total in the last column; ``counts2``/``counts3`` are the aggregates.
Randomness comes from numba's per-thread generator, seeded on entry so a
call is a pure function of its inputs and ``seed``.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def cell_loglik(out, c, log_z, log_p0, log_z_inf, inv2s2, thr):
    if c == 0:
        return 0.0 if out == 0 else -np.inf
    c_cache = log_z.shape[0] - 1
    if out == 0:
        if c <= c_cache:
            return log_p0[c]
        if thr == 0:
            return -np.inf
        # largest term is k = thr since c > thr
        top = -(thr - c) * (thr - c) * inv2s2
        acc = 0.0
        for k in range(1, thr + 1):
            acc += math.exp(-(k - c) * (k - c) * inv2s2 - top)
        return top + math.log(acc) - log_z_inf
    if out <= thr:
        return -np.inf
    lz = log_z[c] if c <= c_cache else log_z_inf
    d = out - c
    return -d * d * inv2s2 - lz


@njit(cache=True, inline="always")
def binom_term(y, n, log_phi, log1m_phi):
    if y < 0 or y > n:
        return -np.inf
    return (math.lgamma(n + 1.0) - math.lgamma(y + 1.0) - math.lgamma(n - y + 1.0)
            + y * log_phi + (n - y) * log1m_phi)


@njit(cache=True, inline="always")
def alloc_step(x, k, d):
    """Change in ``-log C(x+k-1, k-1)`` when ``x`` moves by ``d`` (+/-1)."""
    if k <= 1:
        return 0.0
    if d > 0:
        return math.log(x + 1.0) - math.log(x + k)
    return math.log(x - 1.0 + k) - math.log(x)


@njit(cache=True, nogil=True)
def mh_sweeps(counts1, counts2, counts3, ll1, ll2, ll3, obs1, obs2, obs3,
              parent1, parent2, n_props, seed,
              log_z, log_p0, log_z_inf, inv2s2, thr,
              use_geo, focal, log_phi, log1m_phi, n_child):
    """Run ``n_props`` random-scan +/-1 Metropolis proposals in place.

    Under the geostatistical prior the ratio also carries the binomial term
    and the uniform-allocation terms (remaining classes within a level-2
    unit, each class over the unit's ``n_child`` level-1 children).
    Returns ``(n_accepted, n_boundary, loglik_change)`` where the change is
    the sum of accepted likelihood deltas.
    """
    np.random.seed(seed)
    n1 = counts1.shape[0]
    tot = counts1.shape[1] - 1
    n_acc = 0
    n_boundary = 0
    dll_sum = 0.0
    for _ in range(n_props):
        j = np.random.randint(0, n1)
        i = np.random.randint(0, tot)
        d = 1 if np.random.random() < 0.5 else -1
        log_u = math.log(np.random.random())
        if d < 0 and counts1[j, i] == 0:
            n_boundary += 1
            continue
        u2 = parent1[j]
        u3 = parent2[u2]

        a1 = cell_loglik(obs1[j, i], counts1[j, i] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        b1 = cell_loglik(obs1[j, tot], counts1[j, tot] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        a2 = cell_loglik(obs2[u2, i], counts2[u2, i] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        b2 = cell_loglik(obs2[u2, tot], counts2[u2, tot] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        a3 = cell_loglik(obs3[u3, i], counts3[u3, i] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        b3 = cell_loglik(obs3[u3, tot], counts3[u3, tot] + d, log_z, log_p0, log_z_inf, inv2s2, thr)
        new_sum = a1 + b1 + a2 + b2 + a3 + b3
        if new_sum == -np.inf:
            continue
        dll = new_sum - (ll1[j, i] + ll1[j, tot] + ll2[u2, i] + ll2[u2, tot] + ll3[u3, i] + ll3[u3, tot])

        dprior = 0.0
        if use_geo:
            n0 = counts2[u2, tot]
            y0 = counts2[u2, focal]
            y1 = y0 + d if i == focal else y0
            dprior = (binom_term(y1, n0 + d, log_phi[u2], log1m_phi[u2])
                      - binom_term(y0, n0, log_phi[u2], log1m_phi[u2]))
            if i != focal:
                dprior += alloc_step(n0 - y0, tot - 1, d)
            dprior += alloc_step(counts2[u2, i], n_child[u2], d)

        if log_u < dll + dprior:
            counts1[j, i] += d
            counts1[j, tot] += d
            counts2[u2, i] += d
            counts2[u2, tot] += d
            counts3[u3, i] += d
            counts3[u3, tot] += d
            ll1[j, i] = a1
            ll1[j, tot] = b1
            ll2[u2, i] = a2
            ll2[u2, tot] = b2
            ll3[u3, i] = a3
            ll3[u3, tot] = b3
            n_acc += 1
            dll_sum += dll
    return n_acc, n_boundary, dll_sum


@njit(cache=True)
def loglik_grid(obs, counts, log_z, log_p0, log_z_inf, inv2s2, thr):
    out = np.empty(counts.shape)
    for a in range(counts.shape[0]):
        for b in range(counts.shape[1]):
            out[a, b] = cell_loglik(obs[a, b], counts[a, b], log_z, log_p0, log_z_inf, inv2s2, thr)
    return out
