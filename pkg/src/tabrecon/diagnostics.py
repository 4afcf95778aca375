"""Posterior predictive checks and empirical coverage against known truths.

Two discrepancy statistics are used. The aggregation gap compares summed
level-1 outputs with the direct level-2 output; it exposes how suppression
undercounts on aggregation. The row-sum gap compares the class sum of a
level-1 unit with its separately perturbed total. Replicates are always
produced with the minimal model, so data generated any other way shows up
as a discrepancy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .hierarchy import CountTable
from .perturbation import MinimalPerturbConfig, perturb_table_minimal
from .sampler import PosteriorArchive

QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


def _quantiles(x) -> np.ndarray:
    return np.percentile(np.asarray(x, dtype=float), QUANTILES, method="linear")


def stat_aggregation_gap(table: CountTable, classes=None):
    """Pooled ``sum(level-1 outputs) - level-2 output`` per level-2 unit and class.

    ``classes`` selects 0-based columns (the last column is the row total);
    ``None`` pools every column. Returns ``(differences, quantiles)``.
    """
    h = table.hierarchy
    agg = h.aggregate(table.level(1), 2)
    diff = agg - table.level(2)
    if classes is not None:
        diff = diff[:, list(classes)]
    diff = diff.ravel()
    return diff, _quantiles(diff)


def stat_rowsum_gap(table: CountTable):
    """Per level-1 unit ``sum of class outputs - row-total output``."""
    v = table.level(1)
    diff = v[:, :-1].sum(1) - v[:, -1]
    return diff, _quantiles(diff)


@dataclass
class PpcReport:
    statistic: str
    observed: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    quantiles: tuple = QUANTILES
    n_replicates: int = 0

    @property
    def inside(self) -> np.ndarray:
        return (self.lower <= self.observed) & (self.observed <= self.upper)

    def cells(self) -> list[str]:
        return [f"{o:g} [{lo:g},{hi:g}]" for o, lo, hi in zip(self.observed, self.lower, self.upper)]

    def format_row(self, label: str) -> str:
        return "\t".join([label] + self.cells())

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "quantiles": list(self.quantiles),
            "observed": self.observed.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "inside": self.inside.tolist(),
            "n_replicates": self.n_replicates,
        }


def format_ppc_table(rows: dict[str, PpcReport]) -> str:
    """Rows = datasets, columns = quantiles, predictive intervals in brackets."""
    head = "\t".join(["Quantiles:"] + [f"{q:g}%" for q in QUANTILES])
    return "\n".join([head] + [r.format_row(label) for label, r in rows.items()]) + "\n"


def run_ppc(archive: PosteriorArchive, obs: CountTable, n_replicates: int, rng: np.random.Generator,
            perturb: MinimalPerturbConfig | None = None, classes="focal"):
    """Posterior predictive distribution of both gap statistics.

    Each of ``n_replicates`` retained samples (drawn without replacement) is
    re-perturbed with the minimal model. Returns ``(aggregation, rowsum)``
    reports holding the observed quantiles and the 2.5/97.5 percentiles of
    the replicated quantiles. ``classes`` selects the cells pooled by the
    aggregation gap: ``"focal"`` (default), ``"all"`` (every class and the row
    total) or a list of class indices.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    if archive.n_samples < n_replicates:
        raise ValueError(f"archive has {archive.n_samples} samples, {n_replicates} replicates requested")
    if perturb is None:
        perturb = MinimalPerturbConfig(archive.meta.get("sigma_err", 2.0), archive.meta.get("suppress_threshold", 2))
    if classes == "focal":
        classes = (archive.meta.get("focal_class", 0),)
    elif classes == "all":
        classes = None

    samples = archive.level1_samples()
    pick = np.sort(rng.choice(samples.shape[0], n_replicates, replace=False))
    rep_agg = np.empty((n_replicates, len(QUANTILES)))
    rep_row = np.empty((n_replicates, len(QUANTILES)))
    for r, s in enumerate(pick):
        truth = CountTable.from_level1(archive.hierarchy, samples[s])
        rep = perturb_table_minimal(truth, perturb, rng)
        rep_agg[r] = stat_aggregation_gap(rep, classes)[1]
        rep_row[r] = stat_rowsum_gap(rep)[1]

    reports = []
    for name, reps, observed in (
        ("aggregation-gap", rep_agg, stat_aggregation_gap(obs, classes)[1]),
        ("rowsum-gap", rep_row, stat_rowsum_gap(obs)[1]),
    ):
        lo, hi = np.percentile(reps, [2.5, 97.5], axis=0, method="linear")
        reports.append(PpcReport(name, observed, lo, hi, n_replicates=n_replicates))
    return tuple(reports)


@dataclass
class CoverageReport:
    fractions: np.ndarray  # per level 1..3
    hits: dict = field(default_factory=dict)  # level -> bool array (N_k, n_classes)
    classes: tuple = ()
    replicate: int = 0

    def to_dict(self) -> dict:
        return {"replicate": self.replicate, "classes": list(self.classes), "fractions": self.fractions.tolist()}


def score_coverage(archive: PosteriorArchive, truth: CountTable, classes="focal", replicate: int = 0) -> CoverageReport:
    """Fraction of true cell values inside the central 95% posterior interval, per level.

    Intervals use type-7 percentiles of the retained samples and are
    inclusive at both ends.
    """
    if truth.hierarchy.sizes != archive.hierarchy.sizes or truth.M != archive.M:
        raise ValueError("truth table does not match the archive's hierarchy")
    if classes == "focal":
        classes = (archive.meta.get("focal_class", 0),)
    elif classes == "all":
        classes = tuple(range(archive.M))
    classes = tuple(classes)
    fractions = np.empty(3)
    hits = {}
    for k in (1, 2, 3):
        s = archive.level_samples(k)[:, :, classes]
        lo, hi = np.percentile(s, [2.5, 97.5], axis=0, method="linear")
        t = truth.level(k)[:, classes]
        hit = (lo <= t) & (t <= hi)
        hits[k] = hit
        fractions[k - 1] = hit.mean()
    return CoverageReport(fractions, hits, classes, replicate)


def coverage_summary(reports: list[CoverageReport]) -> dict:
    arr = np.array([r.fractions for r in reports])
    return {
        "replicates": [r.to_dict() for r in reports],
        "mean": arr.mean(0).tolist(),
    }


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))
