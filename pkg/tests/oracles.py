"""Independent reference computations shared by the unit and acceptance tests.

Nothing here touches the sampler: posteriors come from explicit enumeration
of every latent configuration on a grid.
"""

import itertools
import math
from functools import lru_cache

import numpy as np

from tabrecon.hierarchy import CountTable, SpatialHierarchy

GRID = 30


def ztdn_logpmf(k, c, sigma=2.0, kmax=400):
    support = np.arange(1, max(kmax, c + 30 * sigma))
    logw = -((support - c) ** 2) / (2 * sigma ** 2)
    lz = np.log(np.exp(logw - logw.max()).sum()) + logw.max()
    return -((k - c) ** 2) / (2 * sigma ** 2) - lz


def cell_prob(out, c, sigma=2.0, thr=2):
    return _cell_prob(int(out), int(c), float(sigma), int(thr))


@lru_cache(maxsize=None)
def _cell_prob(out, c, sigma, thr):
    if c == 0:
        return 1.0 if out == 0 else 0.0
    if out == 0:
        return sum(math.exp(ztdn_logpmf(k, c, sigma)) for k in range(1, thr + 1))
    if out <= thr:
        return 0.0
    return math.exp(ztdn_logpmf(out, c, sigma))


def pair_fixture(obs_values):
    """One level-3 = one level-2 unit over two level-1 units, M = 2.

    ``obs_values`` = (l1_a, l1_b, l2, l3); each applies to both the single
    class and the row total, which have the same latent value when M = 2.
    Separate totals can be given as a dict ``{"class": (...), "total": (...)}``.
    """
    h = SpatialHierarchy.from_arrays([0, 0], [0], [[0.5, 0.5]], [5])
    if isinstance(obs_values, dict):
        cls, tot = obs_values["class"], obs_values["total"]
    else:
        cls = tot = obs_values
    v1 = np.array([[cls[0], tot[0]], [cls[1], tot[1]]])
    v2 = np.array([[cls[2], tot[2]]])
    v3 = np.array([[cls[3], tot[3]]])
    return h, CountTable(h, (v1, v2, v3), perturbed=True)


def enumerate_pair_posterior(obs: CountTable, grid=GRID, sigma=2.0, thr=2):
    """Exact marginals of the two level-1 cells under the flat prior, truncated to ``0..grid``."""
    o1, o2, o3 = obs.values
    post = np.zeros((grid + 1, grid + 1))
    for a, b in itertools.product(range(grid + 1), repeat=2):
        p = 1.0
        for out, c in ((o1[0, 0], a), (o1[0, 1], a), (o1[1, 0], b), (o1[1, 1], b),
                       (o2[0, 0], a + b), (o2[0, 1], a + b), (o3[0, 0], a + b), (o3[0, 1], a + b)):
            p *= cell_prob(out, c, sigma, thr)
        post[a, b] = p
    post /= post.sum()
    return post.sum(1), post.sum(0)


def geo_fixture():
    """Single level-2 unit with two level-1 children and M = 3 (two classes)."""
    h = SpatialHierarchy.from_arrays([0, 0], [0], [[0.5, 0.5]], [5])
    v1 = np.array([[0, 5, 5], [3, 0, 4]])
    v2 = np.array([[4, 6, 9]])
    v3 = np.array([[5, 5, 11]])
    return h, CountTable(h, (v1, v2, v3), perturbed=True)


def enumerate_geo_posterior(obs: CountTable, phi: float, grid=14, sigma=2.0, thr=2):
    """Marginals of the four level-1 cells under likelihood times the geostatistical prior.

    Prior on a level-2 unit: flat total, binomial focal count (class 0),
    and uniform allocation of each class over the two level-1 children
    (probability ``1 / (x + 1)`` for ``x`` items over two bins).
    """
    o1, o2, o3 = obs.values
    shape = (grid + 1,) * 4
    post = np.zeros(shape)
    for a0, a1, b0, b1 in itertools.product(range(grid + 1), repeat=4):
        y, r = a0 + b0, a1 + b1
        n = y + r
        p = math.comb(n, y) * phi ** y * (1 - phi) ** r / ((y + 1) * (r + 1))
        cells = ((o1[0, 0], a0), (o1[0, 1], a1), (o1[0, 2], a0 + a1),
                 (o1[1, 0], b0), (o1[1, 1], b1), (o1[1, 2], b0 + b1),
                 (o2[0, 0], y), (o2[0, 1], r), (o2[0, 2], n),
                 (o3[0, 0], y), (o3[0, 1], r), (o3[0, 2], n))
        for out, c in cells:
            p *= cell_prob(out, c, sigma, thr)
        post[a0, a1, b0, b1] = p
    post /= post.sum()
    return [post.sum(axis=tuple(x for x in range(4) if x != ax)) for ax in range(4)]


def boundary_expectation(n_props: int) -> float:
    """Expected boundary rejections for one free cell under a flat likelihood.

    The cell starts at 0; each proposal is +1 or -1 with probability 1/2,
    and -1 at 0 is rejected. Exact dynamic programme over the walk.
    """
    p = np.zeros(n_props + 2)
    p[0] = 1.0
    total = 0.0
    for _ in range(n_props):
        total += 0.5 * p[0]
        nxt = np.zeros_like(p)
        nxt[1:] += 0.5 * p[:-1]
        nxt[:-1] += 0.5 * p[1:]
        nxt[0] += 0.5 * p[0]
        p = nxt
    return total


def total_variation(p, q) -> float:
    n = max(len(p), len(q))
    a = np.zeros(n)
    b = np.zeros(n)
    a[: len(p)] = p
    b[: len(q)] = q
    return 0.5 * np.abs(a - b).sum()
