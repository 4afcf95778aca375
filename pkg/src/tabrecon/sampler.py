"""Posterior simulation over level-1 latent counts.

A sweep is ``N1 * (M - 1)`` random-scan proposals, each adding or removing
one count in a uniformly chosen level-1 cell. Proposals that would go
negative are rejected outright, which keeps the kernel symmetric on the
valid lattice. Geostatistical runs interleave a blocked-Gibbs regression
update every ``gibbs_interval`` sweeps.
"""

from __future__ import annotations

import logging
import math
import os
import pickle
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ._kernels import mh_sweeps
from .errors import ConfigError, NumericalError
from .hierarchy import CountTable, SpatialHierarchy
from .latent import LatentState, initial_counts
from .likelihood import CellLikelihoodTable
from .priors import GeoModel, GeoPriorState, HyperPriors, geo_log_prior_term

log = logging.getLogger(__name__)

MODELS = ("maxent", "geostatistical")
RHAT_WARN = 1.05


@dataclass
class ChainConfig:
    n_iterations: int = 2000
    burn_in: int = 1000
    thin: int = 10
    n_chains: int = 1
    rng_seed: int = 0
    gibbs_interval: int = 0
    audit_interval: int = 10_000
    checkpoint_interval: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if self.gibbs_interval < 0 or self.audit_interval < 0 or self.checkpoint_interval < 0:
            raise ConfigError("intervals must be non-negative")


@dataclass
class ModelSpec:
    """Which prior to use and the fixed perturbation-model settings."""

    kind: str = "maxent"
    focal_class: int = 0
    sigma_err: float = 2.0
    suppress_threshold: int = 2
    hyper: HyperPriors = field(default_factory=HyperPriors)

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.kind!r}")

    @property
    def geostatistical(self) -> bool:
        return self.kind == "geostatistical"


class SampleStore:
    """Sparse-delta encoding of a sequence of integer arrays of fixed shape."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        self.first: np.ndarray | None = None
        self.deltas: list[tuple[np.ndarray, np.ndarray]] = []
        self._last: np.ndarray | None = None

    def __len__(self):
        return 0 if self.first is None else 1 + len(self.deltas)

    def append(self, x):
        x = np.asarray(x, dtype=np.int32).ravel()
        if x.size != math.prod(self.shape):
            raise ValueError("sample shape mismatch")
        if self.first is None:
            self.first = x.copy()
        else:
            idx = np.flatnonzero(x != self._last).astype(np.int32)
            self.deltas.append((idx, x[idx].copy()))
        self._last = x.copy()

    def dense(self) -> np.ndarray:
        out = np.empty((len(self),) + self.shape, dtype=np.int64)
        if self.first is None:
            return out
        cur = self.first.astype(np.int64)
        out[0] = cur.reshape(self.shape)
        for s, (idx, val) in enumerate(self.deltas, start=1):
            cur[idx] = val
            out[s] = cur.reshape(self.shape)
        return out


@dataclass
class ChainResult:
    chain_id: int
    store: SampleStore
    beta: list = field(default_factory=list)
    hyper: list = field(default_factory=list)  # (gp_var, gp_range, sigma_iid) per retained sample
    loglik: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    n_proposed: int = 0
    n_accepted: int = 0
    n_boundary: int = 0
    audit_max: float = 0.0
    n_audits: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else float("nan")


class PosteriorArchive:
    """Retained thinned samples from one or more chains plus run metadata."""

    def __init__(self, hierarchy: SpatialHierarchy, M: int, chains: list[ChainResult], meta: dict | None = None):
        self.hierarchy = hierarchy
        self.M = M
        self.chains = chains
        self.meta = dict(meta or {})
        self._cache: dict = {}

    @property
    def n_samples(self) -> int:
        return sum(len(c.store) for c in self.chains)

    def level1_samples(self) -> np.ndarray:
        """``(S, N1, M-1)`` array of retained level-1 class counts, chains concatenated."""
        if "l1" not in self._cache:
            parts = [c.store.dense() for c in self.chains if len(c.store)]
            shape = (0, self.hierarchy.sizes[0], self.M - 1)
            self._cache["l1"] = np.concatenate(parts) if parts else np.empty(shape, dtype=np.int64)
        return self._cache["l1"]

    def level_samples(self, k: int) -> np.ndarray:
        """``(S, N_k, M)`` samples at level ``k`` including the row-total column."""
        key = f"level{k}"
        if key not in self._cache:
            s1 = self.level1_samples()
            full = np.concatenate([s1, s1.sum(2, keepdims=True)], axis=2)
            if k == 1:
                out = full
            else:
                index = self.hierarchy.parent1 if k == 2 else self.hierarchy.parent13
                out = np.zeros((full.shape[0], self.hierarchy.sizes[k - 1], self.M), dtype=np.int64)
                np.add.at(out, (slice(None), index), full)
            self._cache[key] = out
        return self._cache[key]

    def sample_tables(self):
        for s in self.level1_samples():
            yield CountTable.from_level1(self.hierarchy, s)

    def beta_draws(self) -> np.ndarray:
        rows = [np.asarray(c.beta) for c in self.chains if c.beta]
        return np.concatenate(rows) if rows else np.empty((0, 10))

    def hyper_draws(self) -> np.ndarray:
        rows = [np.asarray(c.hyper) for c in self.chains if c.hyper]
        return np.concatenate(rows) if rows else np.empty((0, 3))

    def chain_ids(self) -> np.ndarray:
        return np.concatenate([np.full(len(c.store), c.chain_id) for c in self.chains]) if self.chains else np.empty(0, int)

    @property
    def acceptance_rates(self) -> list[float]:
        return [c.acceptance_rate for c in self.chains]


# ---------------------------------------------------------------- single move


def mh_step(latent: LatentState, rng: np.random.Generator, geo: GeoPriorState | None = None, focal: int = 0):
    """One random-scan +/-1 Metropolis-Hastings proposal applied to ``latent``.

    Returns ``(accepted, (unit, cls, delta))``.
    """
    n1, k = latent.counts[0].shape[0], latent.M - 1
    j = int(rng.integers(n1))
    i = int(rng.integers(k))
    d = 1 if rng.random() < 0.5 else -1
    log_u = math.log(rng.random())
    if latent.counts[0][j, i] + d < 0:
        return False, (j, i, d)
    dll = latent.delta_loglik(j, i, d)
    dprior = 0.0
    if geo is not None:
        u2 = int(latent.hierarchy.parent1[j])
        before = geo_log_prior_term(latent, geo, u2, focal)
        latent.counts[1][u2, [i, -1]] += d
        try:
            after = geo_log_prior_term(latent, geo, u2, focal)
        finally:
            latent.counts[1][u2, [i, -1]] -= d
        dprior = after - before
    if np.isfinite(dll) and log_u < dll + dprior:
        latent.apply_move(j, i, d)
        return True, (j, i, d)
    return False, (j, i, d)


# ---------------------------------------------------------------- chains


def _next_multiple(s, every):
    return (s // every + 1) * every if every else math.inf


def _save_checkpoint(path: Path, payload: dict):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)


def _run_one(obs: CountTable, lik: CellLikelihoodTable, spec: ModelSpec, cfg: ChainConfig,
             seed, chain_id: int, geo_model: GeoModel | None, checkpoint: Path | None, resume: bool) -> ChainResult:
    h = obs.hierarchy
    n1, m = h.sizes[0], obs.M
    sweep_size = n1 * (m - 1)
    focal = spec.focal_class

    payload = None
    if resume and checkpoint is not None and checkpoint.exists():
        with checkpoint.open("rb") as fh:
            payload = pickle.load(fh)
    if payload is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["rng"]
        state = LatentState(obs, lik, payload["mb"])
        geo = payload["geo"]
        result = payload["result"]
        s = payload["sweep"]
        log.info("chain %d resumed at sweep %d", chain_id, s)
    else:
        rng = np.random.default_rng(seed)
        state = LatentState(obs, lik, initial_counts(obs, lik, rng))
        geo = None
        if spec.geostatistical:
            c2 = state.counts[1]
            geo = geo_model.initial_state(c2[:, focal], c2[:, -1])
        result = ChainResult(chain_id, SampleStore((n1, m - 1)))
        s = 0

    log_z, log_p0, log_z_inf, inv2s2, thr = lik.kernel_args()
    c1, c2, c3 = state.counts
    ll1, ll2, ll3 = state.ll
    o1, o2, o3 = (np.ascontiguousarray(v) for v in obs.values)
    empty = np.zeros(h.sizes[1])
    n_child = np.bincount(h.parent1, minlength=h.sizes[1]).astype(np.int64)
    log_phi, log1m_phi = (geo.log_phi() if geo is not None else (empty, empty))
    acc_since = prop_since = 0

    while s < cfg.n_iterations:
        if spec.geostatistical and cfg.gibbs_interval and s % cfg.gibbs_interval == 0:
            geo = geo_model.update(c2[:, focal], c2[:, -1], geo, rng)
            log_phi, log1m_phi = geo.log_phi()

        nxt = min(
            cfg.n_iterations,
            _next_multiple(s, cfg.gibbs_interval if spec.geostatistical else 0),
            _next_multiple(s, cfg.audit_interval),
            _next_multiple(s, cfg.checkpoint_interval),
            cfg.burn_in + cfg.thin if s < cfg.burn_in else cfg.burn_in + _next_multiple(s - cfg.burn_in, cfg.thin),
        )
        n_props = (nxt - s) * sweep_size
        seed_k = int(rng.integers(2 ** 63 - 1))
        n_acc, n_bound, dll = mh_sweeps(
            c1, c2, c3, ll1, ll2, ll3, o1, o2, o3, h.parent1, h.parent2, n_props, seed_k,
            log_z, log_p0, log_z_inf, inv2s2, thr,
            spec.geostatistical, focal, log_phi, log1m_phi, n_child,
        )
        state.loglik += dll
        result.n_proposed += n_props
        result.n_accepted += n_acc
        result.n_boundary += n_bound
        acc_since += n_acc
        prop_since += n_props
        s = nxt

        if s > cfg.burn_in and (s - cfg.burn_in) % cfg.thin == 0:
            result.store.append(c1[:, :-1])
            result.loglik.append(state.loglik)
            result.acceptance.append(acc_since / prop_since)
            acc_since = prop_since = 0
            if geo is not None:
                result.beta.append(geo.beta.copy())
                result.hyper.append((geo.gp_var, geo.gp_range, geo.sigma_iid))
        if (cfg.audit_interval and s % cfg.audit_interval == 0) or s == cfg.n_iterations:
            full = state.full_loglik()
            gap = abs(full - state.loglik)
            result.audit_max = max(result.audit_max, gap)
            result.n_audits += 1
            if not np.isfinite(full):
                raise NumericalError(f"chain {chain_id}: non-finite log-likelihood at sweep {s}")
            if gap > 1e-6:
                log.warning("chain %d: incremental log-likelihood drifted by %.3g at sweep %d", chain_id, gap, s)
            state.loglik = full
        if checkpoint is not None and cfg.checkpoint_interval and s % cfg.checkpoint_interval == 0 and s < cfg.n_iterations:
            _save_checkpoint(checkpoint, {
                "sweep": s, "mb": c1[:, :-1].copy(), "geo": geo,
                "rng": rng.bit_generator.state, "result": result,
            })
    return result


def run_chain(obs: CountTable, hierarchy: SpatialHierarchy | None = None, model: ModelSpec | str = "maxent",
              cfg: ChainConfig | None = None, lik: CellLikelihoodTable | None = None,
              checkpoint_dir=None, resume: bool = False) -> PosteriorArchive:
    """Run ``cfg.n_chains`` independent chains and collect their thinned samples.

    Latent counts start at the observed level-1 outputs (with a repair
    pass for positive observations over zero latent counts). Chains get
    independent streams spawned from ``cfg.rng_seed`` and run on a thread
    pool; the compiled kernel releases the GIL.
    """
    if isinstance(model, str):
        model = ModelSpec(kind=model)
    cfg = cfg or ChainConfig()
    hierarchy = hierarchy or obs.hierarchy
    if hierarchy is not obs.hierarchy and hierarchy.sizes != obs.hierarchy.sizes:
        raise ConfigError("observation table does not match hierarchy")
    if not 0 <= model.focal_class < obs.M - 1:
        raise ConfigError(f"focal class must index one of the {obs.M - 1} classes")
    lik = lik or CellLikelihoodTable(model.sigma_err, model.suppress_threshold)
    geo_model = GeoModel(hierarchy, model.hyper) if model.geostatistical else None
    if model.geostatistical and cfg.gibbs_interval == 0:
        raise ConfigError("geostatistical model needs gibbs_interval >= 1")

    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_chains)
    ckpt = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        ckpt = [Path(checkpoint_dir) / f"chain{c}.ckpt" for c in range(cfg.n_chains)]

    def work(c):
        return _run_one(obs, lik, model, cfg, seeds[c], c, geo_model, ckpt[c] if ckpt else None, resume)

    threads = cfg.threads or os.cpu_count() or 1
    if cfg.n_chains == 1 or threads == 1:
        chains = [work(c) for c in range(cfg.n_chains)]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, cfg.n_chains)) as pool:
            chains = list(pool.map(work, range(cfg.n_chains)))
    if ckpt:
        for p in ckpt:
            p.unlink(missing_ok=True)

    meta = {
        "model": model.kind,
        "focal_class": model.focal_class,
        "sigma_err": model.sigma_err,
        "suppress_threshold": model.suppress_threshold,
        "chain_config": asdict(cfg),
        "acceptance_rates": [c.acceptance_rate for c in chains],
        "audit_max_abs": max(c.audit_max for c in chains),
    }
    archive = PosteriorArchive(hierarchy, obs.M, chains, meta)
    if archive.n_samples:
        archive.meta["rhat"] = convergence_report(archive, model.focal_class)
    return archive


# ---------------------------------------------------------------- summaries


def split_rhat(draws) -> float:
    """Split-chain potential scale reduction for a ``(n_chains, n_draws)`` array."""
    x = np.atleast_2d(np.asarray(draws, dtype=float))
    n = x.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * halves.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def convergence_report(archive: PosteriorArchive, focal: int = 0) -> dict:
    """Split R-hat for level-3 focal and total counts, and for decile contrasts."""
    lengths = {len(c.store) for c in archive.chains}
    if len(lengths) != 1:
        return {}
    n = lengths.pop()
    s3 = archive.level_samples(3).reshape(len(archive.chains), n, archive.hierarchy.sizes[2], archive.M)
    out = {}
    ids = archive.hierarchy.unit_ids[2]
    for u, uid in enumerate(ids):
        out[f"focal[{uid}]"] = split_rhat(s3[:, :, u, focal])
        out[f"total[{uid}]"] = split_rhat(s3[:, :, u, -1])
    beta = archive.beta_draws()
    if beta.size:
        b = beta.reshape(len(archive.chains), n, -1)
        for d in range(b.shape[2] - 1):
            out[f"beta_contrast[{d + 1}]"] = split_rhat(b[:, :, d] - b[:, :, -1])
    finite = [v for v in out.values() if np.isfinite(v)]
    worst = max(finite) if finite else float("nan")
    if finite and worst > RHAT_WARN:
        log.warning("max split R-hat %.3f exceeds %.2f (advisory)", worst, RHAT_WARN)
    return {"max": worst, "values": out}


@dataclass
class LevelSummary:
    mean: np.ndarray
    median: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    p_zero: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.q975 - self.q025


def summarize(archive: PosteriorArchive, min_samples: int = 100) -> dict[int, LevelSummary]:
    """Per-cell posterior mean, median, central 95% interval and P(cell = 0) at every level."""
    if archive.n_samples == 0:
        raise ValueError("archive holds no samples")
    if archive.n_samples < min_samples:
        log.warning("summarizing only %d samples", archive.n_samples)
    out = {}
    for k in (1, 2, 3):
        s = archive.level_samples(k)
        q025, med, q975 = np.percentile(s, [2.5, 50, 97.5], axis=0)
        out[k] = LevelSummary(s.mean(0), med, q025, q975, (s == 0).mean(0))
    return out
