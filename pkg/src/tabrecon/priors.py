"""Priors over latent counts.

Two structures are supported. The maximum-entropy prior is flat over
non-negative level-1 counts and contributes nothing to Metropolis ratios.
The geostatistical prior places a binomial on the focal-class count of each
level-2 unit given its latent row total, with

    logit(phi_u) = beta[decile_u] + g_u + eps_u,

``beta ~ Normal(0, 1)``, ``g`` an exponential-covariance Gaussian process
over level-2 centroids and ``eps`` iid normal. The level-2 row total is
flat; given it, the non-focal remainder is spread uniformly over the other
classes and each level-2 class count is spread uniformly over the unit's
level-1 children, so the level-2 marginal is exactly the binomial above
rather than being inflated by the number of level-1 configurations.
The regression block is
updated by a Gibbs draw on the empirical-logit scale, where the binomial
likelihood is replaced by a normal with known working variance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, log_expit

from .hierarchy import SpatialHierarchy

N_DECILES = 10
JITTER = 1e-8


def maxent_log_prior(latent) -> float:
    """Improper flat prior over non-negative level-1 counts."""
    if np.any(latent.counts[0] < 0):
        return -math.inf
    return 0.0


def exp_cov(d, gp_var: float, gp_range: float, nugget_var: float = 0.0):
    """Exponential covariance ``gp_var * exp(-d / gp_range)`` plus a nugget at ``d == 0``."""
    if not gp_var > 0 or not gp_range > 0:
        raise ValueError("gp_var and gp_range must be positive")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    out = gp_var * np.exp(-d / gp_range) + nugget_var * (d == 0)
    return float(out) if out.ndim == 0 else out


@dataclass
class HyperPriors:
    """Hyper-prior settings for the geostatistical block.

    Variances get half-normal priors with the given scales; the GP range is
    uniform on ``[range_min, range_max]`` (defaults: 5th percentile and
    maximum of the inter-centroid distances).
    """

    beta_sd: float = 1.0
    gp_var_scale: float = 1.0
    iid_var_scale: float = 1.0
    range_min: float | None = None
    range_max: float | None = None
    n_sub: int = 10
    step_log_var: float = 0.3
    step_range: float = 0.3

    def resolved(self, h: SpatialHierarchy) -> "HyperPriors":
        if self.range_min is not None and self.range_max is not None:
            return self
        d = h.distance_matrix()
        off = d[np.triu_indices(d.shape[0], 1)]
        if off.size == 0:
            lo, hi = 1e-3, 1.0
        else:
            lo, hi = float(np.percentile(off, 5)), float(off.max())
        return replace(
            self,
            range_min=self.range_min if self.range_min is not None else lo,
            range_max=self.range_max if self.range_max is not None else hi,
        )


@dataclass
class GeoPriorState:
    beta: np.ndarray
    g: np.ndarray
    eps: np.ndarray
    sigma_iid: float
    gp_var: float
    gp_range: float
    decile: np.ndarray = field(repr=False)

    @property
    def eta(self) -> np.ndarray:
        return self.beta[self.decile - 1] + self.g + self.eps

    @property
    def phi(self) -> np.ndarray:
        return expit(self.eta)

    def log_phi(self):
        eta = self.eta
        return log_expit(eta), log_expit(-eta)

    def copy(self) -> "GeoPriorState":
        return replace(self, beta=self.beta.copy(), g=self.g.copy(), eps=self.eps.copy())


def binomial_logpmf(y, n, log_phi, log1m_phi):
    y = np.asarray(y)
    n = np.asarray(n)
    val = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0) + y * log_phi + (n - y) * log1m_phi
    return np.where((y >= 0) & (y <= n), val, -np.inf)


def log_uniform_allocation(x, k):
    """``-log C(x+k-1, k-1)``: log-probability of one allocation of ``x`` items over ``k`` bins."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    val = -(gammaln(x + k) - gammaln(x + 1.0) - gammaln(np.maximum(k, 1.0)))
    return np.where(k > 1, val, 0.0)


def _unit_terms(c2, n_child, lp, l1p, focal):
    y, n = c2[:, focal], c2[:, -1]
    classes = c2.shape[1] - 1
    out = binomial_logpmf(y, n, lp, l1p) + log_uniform_allocation(n - y, classes - 1)
    return out + log_uniform_allocation(c2[:, :-1], np.asarray(n_child)[:, None]).sum(1)


def geo_log_prior_term(latent, geo: GeoPriorState, unit: int, focal: int = 0) -> float:
    """Geostatistical log-prior contribution of level-2 ``unit`` (up to a constant)."""
    c2 = latent.counts[1][unit:unit + 1]
    lp, l1p = geo.log_phi()
    n_child = np.array([np.count_nonzero(latent.hierarchy.parent1 == unit)])
    return float(_unit_terms(c2, n_child, lp[unit:unit + 1], l1p[unit:unit + 1], focal)[0])


def geo_log_prior(latent, geo: GeoPriorState, focal: int = 0) -> float:
    c2 = latent.counts[1]
    lp, l1p = geo.log_phi()
    n_child = np.bincount(latent.hierarchy.parent1, minlength=c2.shape[0])
    return float(_unit_terms(c2, n_child, lp, l1p, focal).sum())


def empirical_logit(y, n):
    """Empirical logit and its working variance for ``y`` successes out of ``n``."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    z = np.log((y + 0.5) / (n - y + 0.5))
    v = 1.0 / (y + 0.5) + 1.0 / (n - y + 0.5)
    return z, v


def _chol(a):
    a = a.copy()
    a[np.diag_indices_from(a)] += JITTER
    return linalg.cholesky(a, lower=True, check_finite=False)


class GeoModel:
    """Blocked-Gibbs update of the geostatistical regression given latent counts.

    Holds the fixed geometry (distance matrix, decile design) so repeated
    updates only redo the factorizations.
    """

    def __init__(self, hierarchy: SpatialHierarchy, hyper: HyperPriors | None = None):
        self.hierarchy = hierarchy
        self.hyper = (hyper or HyperPriors()).resolved(hierarchy)
        self.dist = hierarchy.distance_matrix()
        self.decile = hierarchy.decile.copy()
        n2 = hierarchy.sizes[1]
        self.X = np.zeros((n2, N_DECILES))
        self.X[np.arange(n2), self.decile - 1] = 1.0
        self._xxt = self.hyper.beta_sd ** 2 * (self.X @ self.X.T)

    # hyper-parameters on an unconstrained scale: log gp_var, logit of the
    # scaled range, log iid variance
    def _to_free(self, gp_var, gp_range, iid_var):
        a, b = self.hyper.range_min, self.hyper.range_max
        r = min(max((gp_range - a) / (b - a), 1e-12), 1 - 1e-12)
        return np.array([math.log(gp_var), math.log(r / (1 - r)), math.log(iid_var)])

    def _from_free(self, t):
        a, b = self.hyper.range_min, self.hyper.range_max
        return math.exp(t[0]), a + (b - a) * expit(t[1]), math.exp(t[2])

    def _log_hyper_target(self, t, z, v):
        gp_var, gp_range, iid_var = self._from_free(t)
        hp = self.hyper
        # half-normal priors on the variances, uniform range, plus log-Jacobians
        lp = -0.5 * (gp_var / hp.gp_var_scale) ** 2 - 0.5 * (iid_var / hp.iid_var_scale) ** 2
        lp += t[0] + t[2] + log_expit(t[1]) + log_expit(-t[1])
        cov = self._xxt + exp_cov(self.dist, gp_var, gp_range)
        cov[np.diag_indices_from(cov)] += iid_var + v
        try:
            L = _chol(cov)
        except linalg.LinAlgError:
            return -math.inf
        alpha = linalg.solve_triangular(L, z, lower=True, check_finite=False)
        return lp - 0.5 * alpha @ alpha - np.log(np.diag(L)).sum()

    def prior_draw(self, rng: np.random.Generator) -> GeoPriorState:
        hp = self.hyper
        gp_var = abs(rng.normal(0, hp.gp_var_scale))
        iid_var = abs(rng.normal(0, hp.iid_var_scale))
        gp_range = rng.uniform(hp.range_min, hp.range_max)
        gp_var, iid_var = max(gp_var, 1e-6), max(iid_var, 1e-6)
        K = exp_cov(self.dist, gp_var, gp_range)
        g = _chol(K) @ rng.standard_normal(K.shape[0])
        return GeoPriorState(
            beta=rng.normal(0, hp.beta_sd, N_DECILES),
            g=g,
            eps=rng.normal(0, math.sqrt(iid_var), K.shape[0]),
            sigma_iid=math.sqrt(iid_var),
            gp_var=gp_var,
            gp_range=gp_range,
            decile=self.decile,
        )

    def initial_state(self, y=None, n=None, rng=None) -> GeoPriorState:
        """Deterministic starting point: zero field, moderate hyper-parameters.

        When counts are supplied, the decile effects start at the decile
        means of the empirical logits.
        """
        hp = self.hyper
        n2 = self.decile.size
        beta = np.zeros(N_DECILES)
        if y is not None:
            z, _ = empirical_logit(y, n)
            for d in range(N_DECILES):
                sel = self.decile == d + 1
                if sel.any():
                    beta[d] = z[sel].mean()
        return GeoPriorState(
            beta=beta,
            g=np.zeros(n2),
            eps=np.zeros(n2),
            sigma_iid=math.sqrt(0.1 * hp.iid_var_scale),
            gp_var=0.1 * hp.gp_var_scale,
            gp_range=hp.range_min + 0.1 * (hp.range_max - hp.range_min),
            decile=self.decile,
        )

    def update(self, y, n, state: GeoPriorState | None, rng: np.random.Generator) -> GeoPriorState:
        """One blocked-Gibbs draw of hyper-parameters, decile effects, field and nugget."""
        y = np.asarray(y)
        n = np.asarray(n)
        if np.all(n == 0):
            return self.prior_draw(rng)
        if state is None:
            state = self.initial_state(y, n)
        hp = self.hyper
        z, v = empirical_logit(y, n)

        # Metropolis sub-chain on the hyper-parameters with beta, g, eps integrated out
        t = self._to_free(state.gp_var, state.gp_range, state.sigma_iid ** 2)
        cur = self._log_hyper_target(t, z, v)
        steps = np.array([hp.step_log_var, hp.step_range, hp.step_log_var])
        for _ in range(hp.n_sub):
            prop = t + steps * rng.standard_normal(3)
            new = self._log_hyper_target(prop, z, v)
            if math.log(rng.random()) < new - cur:
                t, cur = prop, new
        gp_var, gp_range, iid_var = self._from_free(t)

        # beta | z with g and eps integrated out
        K = exp_cov(self.dist, gp_var, gp_range)
        sigma = K.copy()
        sigma[np.diag_indices_from(sigma)] += iid_var + v
        L = _chol(sigma)
        sx = linalg.cho_solve((L, True), self.X, check_finite=False)
        sz = linalg.cho_solve((L, True), z, check_finite=False)
        prec = self.X.T @ sx + np.eye(N_DECILES) / hp.beta_sd ** 2
        Lp = linalg.cholesky(prec, lower=True)
        mean = linalg.cho_solve((Lp, True), self.X.T @ sz)
        beta = mean + linalg.solve_triangular(Lp.T, rng.standard_normal(N_DECILES), lower=False)

        # g | z, beta by pathwise conditioning: prior draw corrected towards the data
        r = z - self.X @ beta
        noise = iid_var + v
        Lk = _chol(K)
        g0 = Lk @ rng.standard_normal(K.shape[0])
        e0 = np.sqrt(noise) * rng.standard_normal(K.shape[0])
        c = K.copy()
        c[np.diag_indices_from(c)] += noise
        g = g0 + K @ linalg.cho_solve((_chol(c), True), r - g0 - e0, check_finite=False)

        # eps | z, beta, g is independent per unit
        prec_e = 1.0 / iid_var + 1.0 / v
        mean_e = ((r - g) / v) / prec_e
        eps = mean_e + rng.standard_normal(mean_e.size) / np.sqrt(prec_e)

        return GeoPriorState(
            beta=beta, g=g, eps=eps, sigma_iid=math.sqrt(iid_var),
            gp_var=gp_var, gp_range=gp_range, decile=self.decile,
        )


def empirical_logit_fit(latent, hierarchy: SpatialHierarchy, hyper_priors: HyperPriors | None,
                        rng: np.random.Generator, current: GeoPriorState | None = None,
                        focal: int = 0, model: GeoModel | None = None) -> GeoPriorState:
    """One blocked-Gibbs draw of the geostatistical state given the latent level-2 counts."""
    model = model or GeoModel(hierarchy, hyper_priors)
    c2 = latent.counts[1]
    return model.update(c2[:, focal], c2[:, -1], current, rng)


@dataclass
class BetaContrastReport:
    """Decile effects relative to decile 10: rows lower / median / upper."""

    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    n_draws: int

    def format_table(self, label: str = "Decile") -> str:
        cols = [str(d) for d in range(1, N_DECILES + 1)]
        lines = ["\t".join([label] + cols)]
        for name, row in (("Lower (2.5%)", self.lower), ("Median (50%)", self.median), ("Upper (97.5%)", self.upper)):
            cells = [f"{x:.2f}" for x in row[:-1]] + ["(ref)"]
            lines.append("\t".join([name] + cells))
        return "\n".join(lines) + "\n"

    def covers(self, truth_contrasts) -> np.ndarray:
        t = np.asarray(truth_contrasts)
        return (self.lower <= t) & (t <= self.upper)


def beta_contrasts(beta_draws) -> np.ndarray:
    b = np.atleast_2d(np.asarray(beta_draws, dtype=float))
    return b - b[:, [N_DECILES - 1]]


def report_beta_contrasts(beta_draws) -> BetaContrastReport:
    """Summarize ``beta_d - beta_10`` by median and central 95% interval."""
    c = beta_contrasts(beta_draws)
    if c.shape[0] < 100:
        warnings.warn(f"only {c.shape[0]} draws; contrasts will be noisy", stacklevel=2)
    lo, med, hi = np.percentile(c, [2.5, 50, 97.5], axis=0)
    # decile 10 is the reference and is identically zero
    for arr in (lo, med, hi):
        arr[-1] = 0.0
    return BetaContrastReport(lo, med, hi, c.shape[0])
