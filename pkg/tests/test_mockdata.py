import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabrecon.errors import ConfigError
from tabrecon.mockdata import (
    MockConfig,
    apportion,
    draw_geo_truth,
    generate_fiducial,
    reconcile_totals,
    simulate,
    synthetic_hierarchy,
)

from conftest import small_hierarchy

SMALL = dict(n_level3=3, level2_per_level3=4, level1_per_level2=3)


def test_synthetic_hierarchy_shape():
    cfg = MockConfig(**SMALL)
    h = synthetic_hierarchy(cfg, np.random.default_rng(0))
    assert h.sizes == (36, 12, 3)
    assert np.all((h.centroids >= 0) & (h.centroids <= 1))
    assert set(h.decile.tolist()) <= set(range(1, 11))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_reconcile_makes_totals_nest(seed):
    h = small_hierarchy(2, 3, 4)
    rng = np.random.default_rng(seed)
    t1 = rng.integers(0, 30, h.sizes[0])
    t2 = rng.integers(0, 100, h.sizes[1])
    t3 = rng.integers(0, 300, h.sizes[2])
    (r1, r2, r3), (s1, s2) = reconcile_totals(t1, t2, t3, h, rng, return_steps=True)
    assert np.array_equal(h.aggregate(r2, 3, 2), r3)
    assert np.array_equal(h.aggregate(r1, 2), r2)
    assert np.array_equal(r3, t3)
    assert r1.min() >= 0 and r2.min() >= 0
    # each step moves one count, so the step count equals the absolute gap
    assert s2.sum() == np.abs(h.aggregate(t2, 3, 2) - t3).sum()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_apportion_meets_both_margins(classes, n_children, seed):
    rng = np.random.default_rng(seed)
    total = sum(classes)
    child = rng.multinomial(total, np.ones(n_children) / n_children)
    out = apportion(classes, child, rng)
    assert np.array_equal(out.sum(0), classes)
    assert np.array_equal(out.sum(1), child)
    assert out.min() >= 0


def test_apportion_is_proportional():
    out = apportion([10, 30], [10, 30], np.random.default_rng(0))
    assert out[:, 0].tolist() == [2, 8] or out[:, 0].tolist() == [3, 7]


def test_apportion_rejects_mismatch():
    with pytest.raises(ValueError):
        apportion([3], [2], np.random.default_rng(0))


def test_zero_phi_gives_empty_focal_class():
    cfg = MockConfig(**SMALL, focal_intercept=-60.0, gp_var=0.0, iid_var=0.0, beta_scale=0.0)
    ds = simulate(cfg)
    assert ds.truth.level(1)[:, 0].sum() == 0
    assert ds.truth.is_consistent()


def test_fiducial_matches_reconciled_totals():
    cfg = MockConfig(**SMALL)
    ds = simulate(cfg)
    t = ds.truth
    assert t.is_consistent()
    assert t.M == 5
    assert not ds.observation.is_consistent()
    assert ds.manifest["sizes"] == [36, 12, 3]
    assert len(ds.manifest["truth"]["beta_contrasts"]) == 10


def test_misspecified_keeps_record_population():
    cfg = MockConfig(**SMALL, scenario="misspecified")
    ds = simulate(cfg)
    assert ds.population is not None
    assert ds.population.size == ds.truth.level(1)[:, :-1].sum()
    assert "record_model" in ds.manifest
    for k in (1, 2, 3):
        v = ds.observation.level(k)
        assert not np.isin(v, [1, 2]).any()


def test_seed_reproducibility():
    a = simulate(MockConfig(**SMALL, rng_seed=5))
    b = simulate(MockConfig(**SMALL, rng_seed=5))
    for k in (1, 2, 3):
        assert np.array_equal(a.observation.level(k), b.observation.level(k))


def test_given_totals_are_respected():
    cfg = MockConfig(**SMALL)
    rng = np.random.default_rng(0)
    h = synthetic_hierarchy(cfg, rng)
    t1 = np.full(h.sizes[0], 20)
    totals = (t1, h.aggregate(t1, 2), h.aggregate(t1, 3))
    ds = simulate(cfg, hierarchy=h, totals=totals)
    assert np.array_equal(ds.truth.level(1)[:, -1], t1)


def test_bad_config():
    with pytest.raises(ConfigError):
        MockConfig(scenario="other")
    with pytest.raises(ConfigError):
        MockConfig(focal_class=4)


def test_geo_truth_phi_in_unit_interval():
    cfg = MockConfig(**SMALL)
    h = synthetic_hierarchy(cfg, np.random.default_rng(0))
    geo = draw_geo_truth(cfg, h, np.random.default_rng(1))
    assert np.all((geo.phi > 0) & (geo.phi < 1))
    assert geo.contrasts()[-1] == 0
