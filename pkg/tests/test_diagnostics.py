import numpy as np
import pytest

from tabrecon.diagnostics import (
    QUANTILES,
    coverage_summary,
    format_ppc_table,
    run_ppc,
    score_coverage,
    stat_aggregation_gap,
    stat_rowsum_gap,
)
from tabrecon.hierarchy import CountTable
from tabrecon.perturbation import (
    MinimalPerturbConfig,
    assign_records,
    perturb_table_minimal,
    perturb_table_records,
    ztdn_pmf,
)
from tabrecon.sampler import ChainResult, PosteriorArchive, SampleStore

from conftest import small_hierarchy


def _archive_of(table, n=200, jitter=None, meta=None):
    store = SampleStore(table.level(1)[:, :-1].shape)
    rng = np.random.default_rng(0)
    for _ in range(n):
        x = table.level(1)[:, :-1]
        if jitter:
            x = np.maximum(x + rng.integers(-jitter, jitter + 1, x.shape), 0)
        store.append(x)
    return PosteriorArchive(table.hierarchy, table.M, [ChainResult(0, store)], meta or {})


def test_gaps_vanish_on_consistent_table(truth_table):
    d, q = stat_aggregation_gap(truth_table)
    assert np.all(d == 0) and np.all(q == 0)
    d, q = stat_rowsum_gap(truth_table)
    assert np.all(d == 0)
    assert q.size == len(QUANTILES)


def _median_gaps(truth, draw, reps=100):
    return np.median([stat_aggregation_gap(draw(), classes=[0, 1])[1][2] for _ in range(reps)])


def expected_output(c, sigma=2.0, thr=2):
    k = np.arange(1, 200)
    p = ztdn_pmf(k, c, sigma)
    return (k * p * (k > thr)).sum()


def test_suppression_fixture_has_negative_median_gap():
    # small level-1 cells, large level-2 cells: level-1 sums undercount
    h = small_hierarchy(2, 4, 10)
    rng = np.random.default_rng(0)
    cfg = MinimalPerturbConfig()

    # minimal model: cells of 3..5 lose mass to suppression
    assert all(expected_output(c) < c for c in (3, 4, 5))
    truth = CountTable.from_level1(h, rng.choice([3, 4, 5], (80, 2)))
    assert _median_gaps(truth, lambda: perturb_table_minimal(truth, cfg, rng)) < 0

    # record model: true 1s and 2s are mostly rounded into suppression
    truth = CountTable.from_level1(h, rng.choice([1, 2], (80, 2)))
    gap = _median_gaps(truth, lambda: perturb_table_records(truth, assign_records(truth.level(1)[:, :-1], rng)))
    assert gap < 0


def test_truncation_lifts_unit_cells_under_minimal_model():
    # for c = 1 the zero truncation outweighs suppression: the mean output exceeds 1
    assert expected_output(1) == pytest.approx(1.3827, abs=1e-4)
    h = small_hierarchy(2, 4, 10)
    rng = np.random.default_rng(1)
    truth = CountTable.from_level1(h, np.ones((80, 2), int))
    assert _median_gaps(truth, lambda: perturb_table_minimal(truth, MinimalPerturbConfig(), rng)) > 0


def test_rowsum_gap_scale():
    h = small_hierarchy(4, 10, 25)
    truth = CountTable.from_level1(h, np.full((1000, 4), 200))
    obs = perturb_table_minimal(truth, MinimalPerturbConfig(), np.random.default_rng(1))
    d, _ = stat_rowsum_gap(obs)
    assert d.std() == pytest.approx(2 * np.sqrt(5), rel=0.1)


def test_ppc_self_consistency(truth_table):
    # archive is the exact truth; the observation is one more minimal-model draw
    obs = perturb_table_minimal(truth_table, MinimalPerturbConfig(), np.random.default_rng(2))
    arch = _archive_of(truth_table)
    agg, row = run_ppc(arch, obs, 200, np.random.default_rng(3), classes="all")
    assert agg.statistic == "aggregation-gap" and row.statistic == "rowsum-gap"
    assert np.all(agg.lower <= agg.upper) and np.all(row.lower <= row.upper)
    assert agg.inside.all() and row.inside.all()
    text = format_ppc_table({"Mock": agg})
    assert text.startswith("Quantiles:") and "[" in text


def test_ppc_errors(truth_table):
    arch = _archive_of(truth_table, n=5)
    with pytest.raises(ValueError):
        run_ppc(arch, truth_table, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_ppc(arch, truth_table, 10, np.random.default_rng(0))


def test_coverage_of_point_mass_is_one(truth_table):
    rep = score_coverage(_archive_of(truth_table), truth_table, classes="all")
    assert np.all(rep.fractions == 1.0)
    assert rep.hits[1].shape == (24, 4)


def test_coverage_detects_misses(truth_table):
    shifted = CountTable.from_level1(truth_table.hierarchy, truth_table.level(1)[:, :-1] + 50)
    rep = score_coverage(_archive_of(shifted), truth_table)
    assert np.all(rep.fractions == 0.0)
    summary = coverage_summary([rep, score_coverage(_archive_of(truth_table), truth_table)])
    assert summary["mean"] == [0.5, 0.5, 0.5]


def test_coverage_hierarchy_mismatch(truth_table):
    other = CountTable.from_level1(small_hierarchy(1, 1, 1), np.zeros((1, 3), int))
    with pytest.raises(ValueError):
        score_coverage(_archive_of(truth_table), other)


def test_coverage_interval_inclusive(truth_table):
    rep = score_coverage(_archive_of(truth_table, jitter=1), truth_table, classes="all")
    assert np.all(rep.fractions > 0.9)
