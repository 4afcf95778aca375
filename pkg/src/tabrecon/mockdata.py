"""Mock ground truth and perturbed observations.

Pipeline: perturbed unit totals at three levels are reconciled so finer
totals sum to the coarser ones; a decile effect and spatial field are
drawn; the focal class at level 2 is binomial given the unit total; the
remaining classes split the remainder by sequential beta-binomial draws;
level-1 cells are apportioned in proportion to level-1 totals; level 3
follows by summation. Observations come from either perturbation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .hierarchy import CountTable, SpatialHierarchy
from .perturbation import (
    MinimalPerturbConfig,
    RecordPopulation,
    TOP_RECORDS,
    assign_records,
    perturb_minimal,
    perturb_table_minimal,
    perturb_table_records,
)
from .priors import N_DECILES, exp_cov

SCENARIOS = ("well_specified", "misspecified")


@dataclass
class MockConfig:
    scenario: str = "well_specified"
    M: int = 5
    focal_class: int = 0
    # synthetic geography
    n_level3: int = 20
    level2_per_level3: int = 20
    level1_per_level2: int = 5
    mean_level1_total: float = 40.0
    total_shape: float = 4.0
    empty_fraction: float = 0.03
    # focal-class generator
    focal_intercept: float = -1.5
    beta_scale: float = 0.5
    gp_var: float = 0.3
    gp_range: float = 0.15
    iid_var: float = 0.05
    # remaining classes
    beta_binomial_a: float = 2.0
    beta_binomial_b: float = 2.0
    sigma_err: float = 2.0
    suppress_threshold: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if not (self.beta_binomial_a > 0 and self.beta_binomial_b > 0):
            raise ConfigError("beta-binomial parameters must be positive")
        if not 0 <= self.focal_class < self.M - 1:
            raise ConfigError("focal_class must index a non-total class")

    @property
    def perturb(self) -> MinimalPerturbConfig:
        return MinimalPerturbConfig(self.sigma_err, self.suppress_threshold)


@dataclass
class GeoTruth:
    beta: np.ndarray
    g: np.ndarray
    eps: np.ndarray
    phi: np.ndarray

    def contrasts(self) -> np.ndarray:
        return self.beta - self.beta[-1]


@dataclass
class MockDataset:
    hierarchy: SpatialHierarchy
    truth: CountTable
    observation: CountTable
    geo: GeoTruth
    manifest: dict = field(default_factory=dict)
    population: RecordPopulation | None = None


def synthetic_hierarchy(cfg: MockConfig, rng: np.random.Generator) -> SpatialHierarchy:
    """Level-3 units tile the unit square; level-2 centroids are uniform within their tile."""
    n3, per2, per1 = cfg.n_level3, cfg.level2_per_level3, cfg.level1_per_level2
    nx = int(math.ceil(math.sqrt(n3)))
    ny = int(math.ceil(n3 / nx))
    tile = np.array([(u % nx, u // nx) for u in range(n3)], dtype=float)
    parent2 = np.repeat(np.arange(n3), per2)
    lo = tile[parent2] / np.array([nx, ny])
    cent = lo + rng.random((parent2.size, 2)) / np.array([nx, ny])
    decile = rng.permutation(np.resize(np.arange(1, N_DECILES + 1), parent2.size))
    parent1 = np.repeat(np.arange(parent2.size), per1)
    return SpatialHierarchy.from_arrays(parent1, parent2, cent, decile)


def synthetic_totals(cfg: MockConfig, h: SpatialHierarchy, rng: np.random.Generator):
    """Perturbed unit totals at all three levels, as a data provider would return them."""
    lam = rng.gamma(cfg.total_shape, cfg.mean_level1_total / cfg.total_shape, h.sizes[0])
    t1 = rng.poisson(lam)
    t1[rng.random(h.sizes[0]) < cfg.empty_fraction] = 0
    t2 = h.aggregate(t1, 2)
    t3 = h.aggregate(t1, 3)
    p = cfg.perturb
    return perturb_minimal(t1, p, rng), perturb_minimal(t2, p, rng), perturb_minimal(t3, p, rng)


def _reconcile_children(child_totals, parent_of, parent_totals, rng, steps):
    children = [[] for _ in range(parent_totals.size)]
    for c, p in enumerate(parent_of):
        children[p].append(c)
    for p, kids in enumerate(children):
        kids = np.asarray(kids)
        diff = int(parent_totals[p] - child_totals[kids].sum())
        steps[p] = abs(diff)
        while diff > 0:
            child_totals[rng.choice(kids)] += 1
            diff -= 1
        while diff < 0:
            positive = kids[child_totals[kids] > 0]
            child_totals[rng.choice(positive)] -= 1
            diff += 1


def reconcile_totals(level1_totals, level2_totals, level3_totals, hierarchy: SpatialHierarchy,
                     rng: np.random.Generator, return_steps: bool = False):
    """Make finer totals sum to coarser ones by random single-count adjustments.

    Level-3 totals are authoritative. Within each level-3 unit the level-2
    totals are nudged by +/-1 on randomly chosen enclosed units until they
    sum correctly; then the same for level-1 totals within each level-2
    unit. A subtraction never picks a unit already at zero.
    """
    t1 = np.array(level1_totals, dtype=np.int64)
    t2 = np.array(level2_totals, dtype=np.int64)
    t3 = np.array(level3_totals, dtype=np.int64)
    if min(t1.min(initial=0), t2.min(initial=0), t3.min(initial=0)) < 0:
        raise ValueError("totals must be non-negative")
    steps2 = np.zeros(t3.size, dtype=np.int64)
    steps1 = np.zeros(t2.size, dtype=np.int64)
    _reconcile_children(t2, hierarchy.parent2, t3, rng, steps2)
    _reconcile_children(t1, hierarchy.parent1, t2, rng, steps1)
    if return_steps:
        return (t1, t2, t3), (steps1, steps2)
    return t1, t2, t3


def apportion(class_counts, child_totals, rng: np.random.Generator) -> np.ndarray:
    """Split class counts over children in proportion to the child totals.

    Classes are placed one at a time into the remaining child capacity by
    largest-remainder rounding, with residual units assigned at random in
    proportion to the fractional parts. Both margins are met exactly.
    """
    class_counts = np.asarray(class_counts, dtype=np.int64)
    cap = np.asarray(child_totals, dtype=np.int64).copy()
    if class_counts.sum() != cap.sum():
        raise ValueError("class counts and child totals disagree")
    out = np.zeros((cap.size, class_counts.size), dtype=np.int64)
    for i, c in enumerate(class_counts):
        if i == class_counts.size - 1:
            out[:, i] = cap
            break
        if c == 0:
            continue
        room = cap.sum()
        share = c * cap / room
        base = np.floor(share).astype(np.int64)
        frac = share - base
        rest = int(c - base.sum())
        if rest:
            pick = rng.choice(cap.size, rest, replace=False, p=frac / frac.sum())
            base[pick] += 1
        out[:, i] = base
        cap -= base
    return out


def draw_geo_truth(cfg: MockConfig, h: SpatialHierarchy, rng: np.random.Generator) -> GeoTruth:
    beta = cfg.focal_intercept + cfg.beta_scale * rng.standard_normal(N_DECILES)
    n2 = h.sizes[1]
    if cfg.gp_var > 0:
        K = exp_cov(h.distance_matrix(), cfg.gp_var, cfg.gp_range)
        K[np.diag_indices_from(K)] += 1e-8
        g = np.linalg.cholesky(K) @ rng.standard_normal(n2)
    else:
        g = np.zeros(n2)
    eps = math.sqrt(cfg.iid_var) * rng.standard_normal(n2)
    phi = expit(beta[h.decile - 1] + g + eps)
    return GeoTruth(beta, g, eps, phi)


def beta_binomial(n, a, b, rng):
    return rng.binomial(n, rng.beta(a, b, np.shape(n)))


def generate_fiducial(cfg: MockConfig, h: SpatialHierarchy, totals, rng: np.random.Generator,
                      geo: GeoTruth | None = None) -> tuple[CountTable, GeoTruth]:
    """Draw a consistent truth table given reconciled totals ``(t1, t2, t3)``."""
    t1, t2, _ = (np.asarray(t) for t in totals)
    if not np.array_equal(h.aggregate(t1, 2), t2):
        raise ValueError("totals are not reconciled")
    geo = geo or draw_geo_truth(cfg, h, rng)
    k = cfg.M - 1
    c2 = np.zeros((h.sizes[1], k), dtype=np.int64)
    c2[:, cfg.focal_class] = rng.binomial(t2, geo.phi)
    rest = t2 - c2[:, cfg.focal_class]
    others = [i for i in range(k) if i != cfg.focal_class]
    for i in others[:-1]:
        c2[:, i] = beta_binomial(rest, cfg.beta_binomial_a, cfg.beta_binomial_b, rng)
        rest = rest - c2[:, i]
    if others:
        c2[:, others[-1]] = rest

    mb = np.zeros((h.sizes[0], k), dtype=np.int64)
    for u, kids in enumerate(h.children(2)):
        mb[kids] = apportion(c2[u], t1[kids], rng)
    return CountTable.from_level1(h, mb), geo


def generate_observation(truth: CountTable, scenario: str, perturb: MinimalPerturbConfig,
                         rng: np.random.Generator):
    """Perturb a truth table; returns ``(observation, population_or_None)``."""
    if scenario == "well_specified":
        return perturb_table_minimal(truth, perturb, rng), None
    if scenario == "misspecified":
        pop = assign_records(truth.level(1)[:, :-1], rng, perturb.sigma_err)
        return perturb_table_records(truth, pop, perturb.suppress_threshold), pop
    raise ConfigError(f"unknown scenario {scenario!r}")


def simulate(cfg: MockConfig, hierarchy: SpatialHierarchy | None = None, totals=None,
             rng: np.random.Generator | None = None) -> MockDataset:
    """Full mock pipeline from geography to perturbed observation."""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    h = hierarchy or synthetic_hierarchy(cfg, rng)
    raw = totals if totals is not None else synthetic_totals(cfg, h, rng)
    rec, steps = reconcile_totals(*raw, h, rng, return_steps=True)
    truth, geo = generate_fiducial(cfg, h, rec, rng)
    obs, pop = generate_observation(truth, cfg.scenario, cfg.perturb, rng)
    manifest = {
        "seed": cfg.rng_seed,
        "scenario": cfg.scenario,
        "config": asdict(cfg),
        "sizes": list(h.sizes),
        "reconcile_steps": {"level1": int(steps[0].sum()), "level2": int(steps[1].sum())},
        "truth": {
            "beta": geo.beta.tolist(),
            "beta_contrasts": geo.contrasts().tolist(),
            "gp_var": cfg.gp_var,
            "gp_range": cfg.gp_range,
            "iid_var": cfg.iid_var,
        },
    }
    if pop is not None:
        manifest["record_model"] = {
            "n_records": int(pop.size),
            "top_records": TOP_RECORDS,
            "sigma_err": pop.sigma_err,
            "error_variance": "2 * s * sigma_err**2 / sqrt(5)",
            "sensitivity": "Uniform(0, 1)",
            "rounding": "half away from zero, negatives clamped to 0",
        }
    return MockDataset(h, truth, obs, geo, manifest, pop)
