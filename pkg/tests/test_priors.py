import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from tabrecon.hierarchy import CountTable, SpatialHierarchy
from tabrecon.latent import LatentState
from tabrecon.likelihood import CellLikelihoodTable
from tabrecon.priors import (
    GeoModel,
    GeoPriorState,
    HyperPriors,
    beta_contrasts,
    binomial_logpmf,
    empirical_logit,
    exp_cov,
    geo_log_prior,
    geo_log_prior_term,
    log_uniform_allocation,
    maxent_log_prior,
    report_beta_contrasts,
)

from conftest import small_hierarchy


def test_binomial_matches_scipy():
    phi = 0.3
    for n in (0, 1, 7, 40):
        for y in range(n + 1):
            got = binomial_logpmf(y, n, math.log(phi), math.log1p(-phi))
            assert got == pytest.approx(stats.binom.logpmf(y, n, phi))
    assert binomial_logpmf(1, 2, math.log(0.5), math.log(0.5)) == pytest.approx(math.log(0.5))
    assert binomial_logpmf(0, 0, -1.0, -2.0) == 0.0
    assert binomial_logpmf(3, 2, -1.0, -1.0) == -np.inf


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 200), st.integers(1, 12))
def test_allocation_term_is_inverse_composition_count(x, k):
    assert log_uniform_allocation(x, k) == pytest.approx(-math.log(math.comb(x + k - 1, k - 1)), abs=1e-9)


def test_exp_cov_values_and_errors():
    assert exp_cov(0.0, 2.0, 0.5) == 2.0
    assert exp_cov(0.5, 2.0, 0.5) == pytest.approx(2.0 / math.e)
    assert exp_cov(0.0, 1.0, 1.0, nugget_var=0.3) == pytest.approx(1.3)
    with pytest.raises(ValueError):
        exp_cov(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        exp_cov(1.0, 1.0, -1.0)


def test_exp_cov_is_positive_definite(hier):
    K = exp_cov(hier.distance_matrix(), 1.0, 0.3)
    assert np.linalg.eigvalsh(K).min() > 0


def test_empirical_logit():
    z, v = empirical_logit([0, 5], [10, 10])
    assert z[1] == pytest.approx(0.0)
    assert z[0] == pytest.approx(math.log(0.5 / 10.5))
    assert v[1] == pytest.approx(2 / 5.5)


def _geo_state(n2, phi):
    eta = np.full(n2, math.log(phi / (1 - phi)))
    return GeoPriorState(beta=np.zeros(10), g=eta, eps=np.zeros(n2), sigma_iid=0.1,
                         gp_var=1.0, gp_range=0.2, decile=np.resize(np.arange(1, 11), n2))


def test_geo_prior_terms_sum_to_total(hier, truth_table):
    lat = LatentState(truth_table, CellLikelihoodTable(), truth_table.level(1)[:, :-1])
    geo = _geo_state(hier.sizes[1], 0.2)
    total = geo_log_prior(lat, geo)
    assert total == pytest.approx(sum(geo_log_prior_term(lat, geo, u) for u in range(hier.sizes[1])))
    assert maxent_log_prior(lat) == 0.0


def test_geo_prior_term_by_hand(hier, truth_table):
    lat = LatentState(truth_table, CellLikelihoodTable(), truth_table.level(1)[:, :-1])
    geo = _geo_state(hier.sizes[1], 0.2)
    c2 = truth_table.level(2)[0]
    y, n = c2[0], c2[-1]
    want = stats.binom.logpmf(y, n, 0.2)
    want -= math.log(math.comb(n - y + 1, 1))  # remainder over the two other classes
    want -= sum(math.log(math.comb(int(c) + 3, 3)) for c in c2[:-1])  # four level-1 children
    assert geo_log_prior_term(lat, geo, 0) == pytest.approx(want)


def test_hyper_range_defaults(hier):
    hp = HyperPriors().resolved(hier)
    d = hier.distance_matrix()[np.triu_indices(6, 1)]
    assert hp.range_min == pytest.approx(np.percentile(d, 5))
    assert hp.range_max == pytest.approx(d.max())


def _decile_fixture(seed=0, n2=200, n=400):
    rng = np.random.default_rng(seed)
    parent2 = np.repeat(np.arange(4), n2 // 4)
    h = SpatialHierarchy.from_arrays(np.arange(n2), parent2, rng.random((n2, 2)), np.resize(np.arange(1, 11), n2))
    beta = rng.normal(-1.0, 0.8, 10)
    eta = beta[h.decile - 1] + 0.1 * rng.standard_normal(n2)
    y = rng.binomial(n, 1 / (1 + np.exp(-eta)))
    return h, beta, y, np.full(n2, n)


def test_gibbs_recovers_decile_contrasts():
    h, beta, y, n = _decile_fixture()
    model = GeoModel(h)
    rng = np.random.default_rng(1)
    state = model.initial_state(y, n)
    draws = []
    for it in range(300):
        state = model.update(y, n, state, rng)
        if it >= 100:
            draws.append(state.beta)
    rep = report_beta_contrasts(np.array(draws))
    truth = beta - beta[-1]
    assert rep.covers(truth).sum() >= 9
    assert np.abs(rep.median - truth).max() < 0.3


def test_gibbs_state_shapes_and_positivity():
    h, _, y, n = _decile_fixture(n2=40)
    model = GeoModel(h)
    s = model.update(y, n, None, np.random.default_rng(0))
    assert s.beta.shape == (10,) and s.g.shape == (40,) and s.eps.shape == (40,)
    assert s.gp_var > 0 and s.sigma_iid > 0
    assert model.hyper.range_min <= s.gp_range <= model.hyper.range_max
    assert np.all((s.phi > 0) & (s.phi < 1))


def test_all_empty_units_fall_back_to_prior():
    h, _, y, n = _decile_fixture(n2=20)
    s = GeoModel(h).update(np.zeros(20, int), np.zeros(20, int), None, np.random.default_rng(0))
    assert np.all(np.isfinite(s.eta))


def test_contrast_report_layout():
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(500, 10))
    c = beta_contrasts(draws)
    assert np.all(c[:, -1] == 0)
    rep = report_beta_contrasts(draws)
    text = rep.format_table()
    lines = text.strip().splitlines()
    assert len(lines) == 4
    assert all(line.endswith("(ref)") for line in lines[1:])
    assert np.all(rep.lower <= rep.median) and np.all(rep.median <= rep.upper)


def test_contrast_report_warns_on_few_draws():
    with pytest.warns(UserWarning):
        report_beta_contrasts(np.zeros((10, 10)))
