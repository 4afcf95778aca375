"""Forward simulators for the two perturbation mechanisms.

The minimal model adds zero-truncated discrete-normal noise to every
non-zero cell independently and suppresses small results to zero. The
individual-record model attaches a fixed sensitivity and error to each
record and perturbs any cell by the errors of its most sensitive members,
which correlates cells that share members. Only the minimal model has a
tractable likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .hierarchy import CountTable

TAIL_SIGMAS = 12.0
TOP_RECORDS = 5


@dataclass(frozen=True)
class MinimalPerturbConfig:
    sigma_err: float = 2.0
    suppress_threshold: int = 2

    def __post_init__(self):
        if not self.sigma_err > 0:
            raise ValueError("sigma_err must be positive")
        if self.suppress_threshold < 0:
            raise ValueError("suppress_threshold must be non-negative")


def _half_width(sigma: float) -> int:
    return int(math.ceil(TAIL_SIGMAS * sigma)) + 1


@lru_cache(maxsize=16)
def _offset_weights(sigma: float) -> np.ndarray:
    w = _half_width(sigma)
    off = np.arange(-w, w + 1, dtype=float)
    return np.exp(-0.5 * (off / sigma) ** 2)


def ztdn_pmf(k, mean: int, sigma: float) -> np.ndarray:
    """Zero-truncated discrete normal pmf on {1, 2, ...}, evaluated at ``k``."""
    w = _half_width(sigma)
    support = np.arange(max(1, mean - w), mean + w + 1)
    norm = np.exp(-0.5 * ((support - mean) / sigma) ** 2).sum()
    k = np.asarray(k)
    return np.where(k >= 1, np.exp(-0.5 * ((k - mean) / sigma) ** 2) / norm, 0.0)


def sample_zero_truncated_discrete_normal(mean, sigma: float, rng: np.random.Generator, size=None):
    """Draw k >= 1 with P(k) proportional to exp(-(k - mean)^2 / (2 sigma^2)).

    ``mean`` may be an integer or an integer array (all >= 1). Sampling is by
    CDF inversion over mean +/- 12 sigma; the omitted tail mass is below
    exp(-72).
    """
    scalar = np.ndim(mean) == 0 and size is None
    mean = np.asarray(mean, dtype=np.int64)
    if size is not None:
        mean = np.broadcast_to(mean, size)
    if np.any(mean < 1):
        raise ValueError("mean must be >= 1")
    flat = mean.ravel()
    u = rng.random(flat.size)
    out = np.empty(flat.size, dtype=np.int64)

    w = _half_width(sigma)
    weights = _offset_weights(sigma)
    full = flat > w
    if full.any():
        cdf = np.cumsum(weights)
        idx = np.searchsorted(cdf, u[full] * cdf[-1], side="right")
        out[full] = flat[full] - w + np.minimum(idx, weights.size - 1)
    if (~full).any():
        small = np.flatnonzero(~full)
        for m in np.unique(flat[small]):
            sel = small[flat[small] == m]
            # support 1 .. m + w, offsets start at 1 - m
            cdf = np.cumsum(weights[w + 1 - m:])
            idx = np.searchsorted(cdf, u[sel] * cdf[-1], side="right")
            out[sel] = 1 + np.minimum(idx, cdf.size - 1)
    out = out.reshape(mean.shape)
    return int(out) if scalar else out


def perturb_minimal(c_true, cfg: MinimalPerturbConfig, rng: np.random.Generator):
    """Apply noise then suppression to one count or an array of counts."""
    scalar = np.ndim(c_true) == 0
    c = np.atleast_1d(np.asarray(c_true, dtype=np.int64))
    if np.any(c < 0):
        raise ValueError("true counts must be non-negative")
    out = np.zeros_like(c)
    pos = c > 0
    if pos.any():
        inter = sample_zero_truncated_discrete_normal(c[pos], cfg.sigma_err, rng)
        out[pos] = np.where(inter > cfg.suppress_threshold, inter, 0)
    return int(out[0]) if scalar else out


def perturb_table_minimal(truth: CountTable, cfg: MinimalPerturbConfig, rng: np.random.Generator) -> CountTable:
    """Perturb every cell and every row total at every level independently."""
    sizes = [v.size for v in truth.values]
    flat = np.concatenate([v.ravel() for v in truth.values])
    pert = perturb_minimal(flat, cfg, rng)
    parts = np.split(pert, np.cumsum(sizes)[:-1])
    vals = tuple(p.reshape(v.shape) for p, v in zip(parts, truth.values))
    return CountTable(truth.hierarchy, vals, perturbed=cfg.suppress_threshold >= 2)


@dataclass(frozen=True, eq=False)
class RecordPopulation:
    """Individual records with fixed sensitivity rankings and error terms.

    ``unit`` is the level-1 index and ``cls`` the 0-based class (< M - 1)
    of each record.
    """

    unit: np.ndarray
    cls: np.ndarray
    sensitivity: np.ndarray
    error: np.ndarray
    sigma_err: float
    n_units: int
    n_classes: int

    def __post_init__(self):
        for a in (self.unit, self.cls, self.sensitivity, self.error):
            a.setflags(write=False)

    @property
    def size(self) -> int:
        return self.unit.size


def assign_records(level1_classes, rng: np.random.Generator, sigma_err: float = 2.0) -> RecordPopulation:
    """Create one record per counted item and scatter them over the level-1 cells.

    ``level1_classes`` is the ``(N1, M-1)`` array of true class counts (the
    row-total column must not be included). Each record gets
    ``s ~ Uniform(0, 1)`` and ``e ~ Normal(0, variance = 2 s sigma^2 / sqrt(5))``.
    """
    c = np.asarray(level1_classes, dtype=np.int64)
    n_units, n_classes = c.shape
    cell = np.repeat(np.arange(c.size), c.ravel())
    cell = rng.permutation(cell)
    s = rng.uniform(0.0, 1.0, cell.size)
    # uniform(0, 1) can return exactly 0
    s = np.where(s > 0.0, s, np.nextafter(0.0, 1.0))
    var = 2.0 * s * sigma_err ** 2 / math.sqrt(TOP_RECORDS)
    e = rng.normal(0.0, np.sqrt(var))
    return RecordPopulation(
        unit=cell // n_classes,
        cls=cell % n_classes,
        sensitivity=s,
        error=e,
        sigma_err=sigma_err,
        n_units=n_units,
        n_classes=n_classes,
    )


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _finish(c_true, err_sum, threshold):
    inter = _round_half_away(np.asarray(c_true, dtype=float) + err_sum)
    inter = np.maximum(inter, 0.0).astype(np.int64)
    return np.where(inter > threshold, inter, 0)


def perturb_cell_records(sensitivity, error, c_true: int, threshold: int = 2, top: int = TOP_RECORDS) -> int:
    """Perturb one cell given the sensitivities and errors of its member records."""
    s = np.asarray(sensitivity, dtype=float)
    e = np.asarray(error, dtype=float)
    if s.size == 0:
        return int(_finish(c_true, 0.0, threshold))
    chosen = np.argsort(-s, kind="stable")[:top]
    return int(_finish(c_true, e[chosen].sum(), threshold))


def top_error_sums(keys: np.ndarray, sensitivity: np.ndarray, error: np.ndarray, n_groups: int, top: int = TOP_RECORDS):
    """Sum the errors of the ``top`` most sensitive records within each group."""
    if keys.size == 0:
        return np.zeros(n_groups)
    order = np.lexsort((-sensitivity, keys))
    k_sorted = keys[order]
    starts = np.searchsorted(k_sorted, np.arange(n_groups))
    rank = np.arange(k_sorted.size) - starts[k_sorted]
    keep = rank < top
    return np.bincount(k_sorted[keep], weights=error[order][keep], minlength=n_groups)


def perturb_table_records(truth: CountTable, pop: RecordPopulation, threshold: int = 2, top: int = TOP_RECORDS) -> CountTable:
    """Perturb every cell and row total at every level with the record model.

    Aggregate cells re-rank over the union of their member records rather
    than summing finer perturbations; a row total's members are all the
    unit's records.
    """
    h = truth.hierarchy
    m = truth.M
    k_cls = m - 1
    unit_at = (pop.unit, h.parent1[pop.unit], h.parent13[pop.unit])
    out = []
    for k, units in zip((1, 2, 3), unit_at):
        n_units = h.sizes[k - 1]
        cls_sums = top_error_sums(units * k_cls + pop.cls, pop.sensitivity, pop.error, n_units * k_cls, top)
        tot_sums = top_error_sums(units, pop.sensitivity, pop.error, n_units, top)
        sums = np.concatenate([cls_sums.reshape(n_units, k_cls), tot_sums[:, None]], axis=1)
        out.append(_finish(truth.level(k), sums, threshold))
    return CountTable(h, tuple(out), perturbed=threshold >= 2)
