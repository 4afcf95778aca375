"""Log-likelihood of perturbed outputs under the minimal perturbation model.

For ``c_true >= 1`` the intermediate count follows a zero-truncated
discrete normal; outputs at or below the suppression threshold collapse to
zero. ``P(0 | c_true)`` is kept as an explicit per-``c_true`` quantity so
the random-zero/structural-zero mixture never has to be evaluated as a sum
of tiny probabilities inside the sampler.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError
from .perturbation import MinimalPerturbConfig

CACHE_SIZE = 256
NORMALIZATION_TOL = 1e-9


class CellLikelihoodTable:
    """Cached ``log P(c_output | c_true)`` for one noise scale and threshold.

    ``log_z[c]`` is the log normalizer of the truncated discrete normal with
    mean ``c``; beyond ``c_cache`` the truncation at 1 is invisible and the
    normalizer equals ``log_z_inf``. ``log_p0[c]`` is the log probability of
    a suppressed output.
    """

    def __init__(self, sigma_err: float = 2.0, suppress_threshold: int = 2, cache_size: int = CACHE_SIZE):
        MinimalPerturbConfig(sigma_err, suppress_threshold)
        self.sigma_err = float(sigma_err)
        self.suppress_threshold = int(suppress_threshold)
        self.inv2s2 = 0.5 / self.sigma_err ** 2
        self.half_width = int(math.ceil(12.0 * self.sigma_err))
        self.c_cache = max(int(cache_size), self.half_width + self.suppress_threshold + 2)

        w = self.half_width
        off = np.arange(-w, w + 1, dtype=float)
        log_w = -off ** 2 * self.inv2s2
        self.log_z_inf = float(logsumexp(log_w))

        c = np.arange(self.c_cache + 1)
        log_z = np.full(c.size, -np.inf)
        log_p0 = np.full(c.size, -np.inf)
        thr_k = np.arange(1, self.suppress_threshold + 1, dtype=float)
        for ci in range(1, c.size):
            # support k >= 1 means offsets >= 1 - ci
            lo = max(-w, 1 - ci)
            log_z[ci] = logsumexp(log_w[lo + w:])
            if thr_k.size:
                log_p0[ci] = logsumexp(-(thr_k - ci) ** 2 * self.inv2s2) - log_z[ci]
        log_p0[0] = 0.0
        self.log_z = log_z
        self.log_p0 = log_p0
        self.log_pmf = self._build_pmf_cache()
        self._check_normalization()

    @classmethod
    def from_config(cls, cfg: MinimalPerturbConfig, cache_size: int = CACHE_SIZE):
        return cls(cfg.sigma_err, cfg.suppress_threshold, cache_size)

    def _build_pmf_cache(self) -> np.ndarray:
        n_out = self.c_cache + self.half_width + 1
        out = np.arange(n_out)
        c = np.arange(self.c_cache + 1)
        return self.log_lik_array(np.broadcast_to(out, (c.size, n_out)), np.broadcast_to(c[:, None], (c.size, n_out)), check=False)

    def _check_normalization(self):
        upto = min(200, self.c_cache)
        p = np.exp(self.log_pmf[: upto + 1])
        total = p.sum(axis=1)
        bad = np.flatnonzero(np.abs(total - 1.0) > NORMALIZATION_TOL)
        if bad.size:
            raise ArithmeticError(f"pmf normalization failed for c_true={bad[0]} (sum={total[bad[0]]!r})")

    def _log_z(self, c: np.ndarray) -> np.ndarray:
        return np.where(c <= self.c_cache, self.log_z[np.minimum(c, self.c_cache)], self.log_z_inf)

    def _log_p0(self, c: np.ndarray) -> np.ndarray:
        res = self.log_p0[np.minimum(c, self.c_cache)].astype(float)
        big = c > self.c_cache
        if big.any():
            cb = c[big].astype(float)
            k = np.arange(1, self.suppress_threshold + 1, dtype=float)
            if k.size:
                res[big] = logsumexp(-(k[None, :] - cb[:, None]) ** 2 * self.inv2s2, axis=1) - self.log_z_inf
            else:
                res[big] = -np.inf
        return res

    def log_lik_array(self, c_output, c_true, check: bool = True) -> np.ndarray:
        """Elementwise ``log P(c_output | c_true)``."""
        out = np.asarray(c_output, dtype=np.int64)
        true = np.asarray(c_true, dtype=np.int64)
        out, true = np.broadcast_arrays(out, true)
        if check and np.any((out >= 1) & (out <= self.suppress_threshold)):
            raise DomainError("impossible observation: value suppressed by the perturbation model")
        res = np.empty(out.shape, dtype=float)
        zero_true = true == 0
        res[zero_true] = np.where(out[zero_true] == 0, 0.0, -np.inf)
        pos = ~zero_true
        o, t = out[pos], true[pos]
        val = np.empty(o.shape, dtype=float)
        sup = o == 0
        val[sup] = self._log_p0(t[sup])
        d = (o[~sup] - t[~sup]).astype(float)
        val[~sup] = -d * d * self.inv2s2 - self._log_z(t[~sup])
        res[pos] = val
        res[(out >= 1) & (out <= self.suppress_threshold)] = -np.inf
        return res

    def log_cell_likelihood(self, c_output: int, c_true: int) -> float:
        if c_output < 0 or c_true < 0:
            raise ValueError("counts must be non-negative")
        if 1 <= c_output <= self.suppress_threshold:
            raise DomainError(f"impossible observation: {c_output} is suppressed to 0")
        return float(self.log_lik_array(c_output, c_true, check=False))

    def kernel_args(self):
        """Arrays and scalars consumed by the compiled sampler kernel."""
        return (self.log_z, self.log_p0, self.log_z_inf, self.inv2s2, self.suppress_threshold)


def table_log_likelihood(obs, latent, lik: CellLikelihoodTable | None = None) -> float:
    """Sum of cell log-likelihoods over all classes, units and levels.

    ``latent`` may be a :class:`~tabrecon.latent.LatentState` or a consistent
    :class:`~tabrecon.hierarchy.CountTable` of true counts.
    """
    if lik is None:
        lik = latent.lik
    true_vals = latent.values if hasattr(latent, "values") else latent.counts
    if obs.M != true_vals[0].shape[1]:
        raise ValueError("observation and latent state disagree on M")
    return float(sum(lik.log_lik_array(o, t).sum() for o, t in zip(obs.values, true_vals)))


def delta_log_likelihood(latent, unit: int, cls: int, delta: int) -> float:
    """Exact change in the table log-likelihood if level-1 cell ``(unit, cls)`` moves by ``delta``.

    Only the six affected terms are evaluated: the cell and its row total
    at each of the three levels.
    """
    return latent.delta_loglik(unit, cls, delta)
