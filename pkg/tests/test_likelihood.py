import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabrecon.errors import DomainError
from tabrecon.hierarchy import CountTable
from tabrecon.latent import LatentState, initial_counts
from tabrecon.likelihood import CellLikelihoodTable, delta_log_likelihood, table_log_likelihood
from tabrecon.perturbation import MinimalPerturbConfig, perturb_table_minimal

from conftest import small_hierarchy

LIK = CellLikelihoodTable()


def brute_prob(out, c, sigma=2.0, thr=2, kmax=2000):
    """P(output | c) by direct summation over the untruncated support."""
    if c == 0:
        return float(out == 0)
    k = np.arange(1, kmax + 1)
    w = np.exp(-((k - c) ** 2) / (2 * sigma ** 2))
    p = w / w.sum()
    if out == 0:
        return p[:thr].sum()
    if out <= thr:
        return 0.0
    return p[out - 1]


@pytest.mark.parametrize("c", [0, 1, 2, 3, 5, 26, 27, 100, 255, 256, 257, 1000])
def test_cell_likelihood_matches_brute_force(c):
    for out in {0, 3, 4, max(c - 3, 3), max(c, 3), c + 5}:
        want = brute_prob(out, c)
        got = math.exp(LIK.log_cell_likelihood(out, c))
        assert got == pytest.approx(want, rel=1e-10, abs=1e-300)


def test_normalization_every_c_up_to_200():
    for c in range(201):
        outs = np.concatenate([[0], np.arange(3, c + 60)])
        total = np.exp(LIK.log_lik_array(outs, np.full(outs.size, c))).sum()
        assert abs(total - 1.0) < 1e-9


def test_structural_zero_conflict():
    assert LIK.log_cell_likelihood(5, 0) == -np.inf
    assert LIK.log_cell_likelihood(0, 0) == 0.0


def test_suppressed_value_is_domain_error():
    with pytest.raises(DomainError):
        LIK.log_cell_likelihood(2, 4)
    with pytest.raises(DomainError):
        LIK.log_lik_array([0, 1], [3, 3])


def test_beyond_cache_uses_tail_constant():
    small = CellLikelihoodTable(cache_size=10)
    for c in (40, 41, 300):
        for out in (0, c - 2, c + 1):
            assert small.log_cell_likelihood(out, c) == pytest.approx(LIK.log_cell_likelihood(out, c), abs=1e-12)


def test_zero_threshold_means_exact_zero():
    lik = CellLikelihoodTable(suppress_threshold=0)
    assert lik.log_cell_likelihood(0, 1) == -np.inf
    assert lik.log_cell_likelihood(1, 1) == pytest.approx(math.log(brute_prob(1, 1, thr=0)))


def _state(seed=0, n3=2, per2=3, per1=4, big=False):
    h = small_hierarchy(n3, per2, per1, seed)
    rng = np.random.default_rng(seed)
    lam = [30.0, 60.0] if big else [1.5, 6.0]
    truth = CountTable.from_level1(h, rng.poisson(lam, size=(h.sizes[0], 2)))
    obs = perturb_table_minimal(truth, MinimalPerturbConfig(), rng)
    return h, truth, obs


def test_table_likelihood_counts_every_cell():
    h, truth, obs = _state()
    total = table_log_likelihood(obs, truth, LIK)
    want = sum(math.log(brute_prob(o, t)) if brute_prob(o, t) > 0 else -np.inf
               for k in (1, 2, 3) for o, t in zip(obs.level(k).ravel(), truth.level(k).ravel()))
    assert total == pytest.approx(want, rel=1e-9)


def test_truth_is_locally_optimal_for_unperturbed_large_cells():
    h, truth, _ = _state(big=True)
    latent = LatentState(truth, LIK, truth.level(1)[:, :-1])
    worse = 0
    n = 0
    for j in range(h.sizes[0]):
        for i in range(2):
            n += 1
            up = latent.delta_loglik(j, i, +1)
            down = latent.delta_loglik(j, i, -1)
            worse += (up < 0) and (down < 0)
    assert worse / n >= 0.95


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.tuples(st.integers(0, 23), st.integers(0, 1), st.sampled_from([-1, 1])), max_size=60))
def test_incremental_matches_full(seed, moves):
    h, truth, obs = _state(seed % 50)
    latent = LatentState(obs, LIK, truth.level(1)[:, :-1])
    for j, i, d in moves:
        if latent.counts[0][j, i] + d < 0:
            continue
        full_before = latent.full_loglik()
        dll = delta_log_likelihood(latent, j, i, d)
        latent.apply_move(j, i, d)
        full_after = latent.full_loglik()
        if np.isfinite(full_before) and np.isfinite(full_after):
            assert dll == pytest.approx(full_after - full_before, abs=1e-9)
    assert latent.is_consistent()
    if np.isfinite(latent.loglik):
        assert latent.loglik == pytest.approx(latent.full_loglik(), abs=1e-8)


def test_latent_view_is_read_only():
    _, truth, obs = _state()
    latent = LatentState(obs, LIK, truth.level(1)[:, :-1])
    with pytest.raises(ValueError):
        latent.mb_counts[0, 0] = 3


def test_negative_move_rejected():
    _, _, obs = _state()
    latent = LatentState(obs, LIK, np.zeros((24, 2), dtype=int))
    with pytest.raises(ValueError):
        latent.delta_loglik(0, 0, -1)


@pytest.mark.parametrize("seed", range(5))
def test_initial_state_has_finite_likelihood(seed):
    _, _, obs = _state(seed)
    mb = initial_counts(obs, LIK, np.random.default_rng(seed))
    assert np.isfinite(LatentState(obs, LIK, mb).loglik)
