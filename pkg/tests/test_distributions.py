import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_grad, five_mixtures, rel_err
from diffcom_sim.distributions import (DimensionError, GaussianMixture, gaussian, log_density, perturbed_marginal,
                                       sample, score, standard_normal, symmetric_pair)
from diffcom_sim.engine import forward_sample
from diffcom_sim.schedule import build_schedule, vp_single_level


def test_standard_normal_log_density_at_zero():
    assert log_density(standard_normal(), 0.0) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def test_symmetric_pair_log_density_symmetric():
    g = symmetric_pair(1.7)
    a = np.linspace(-5, 5, 41)
    assert np.allclose(g.log_density(a[:, None]), g.log_density(-a[:, None]), rtol=0, atol=1e-14)


def test_density_integrates_to_one(gmm1d):
    x = np.linspace(-40, 40, 400001)
    total = np.trapezoid(np.exp(gmm1d.log_density(x[:, None])), x)
    assert abs(total - 1.0) <= 1e-6


def test_score_standard_normal():
    assert score(standard_normal(), 2.0) == pytest.approx(-2.0)


def test_score_symmetric_pair_zero_at_origin():
    assert np.all(symmetric_pair(3.0, dim=2).score(np.zeros(2)) == 0.0)


@pytest.mark.parametrize("k", range(5))
def test_score_matches_finite_differences(k):
    g = five_mixtures()[k]
    x = np.random.default_rng(k).normal(0.0, 2.0, (100, g.dim))
    fd = fd_grad(g.log_density, x)
    s = g.score(x)
    err = np.linalg.norm(s - fd, axis=1) / np.linalg.norm(fd, axis=1)
    assert err.max() <= 1e-4


@pytest.mark.parametrize("k", range(5))
def test_perturbed_score_matches_finite_differences(k, vp):
    g = five_mixtures()[k]
    x = np.random.default_rng(10 + k).normal(0.0, 2.0, (100, g.dim))
    for i in (1, 250, 999):
        m = perturbed_marginal(g, vp, i)
        fd = fd_grad(m.log_density, x)
        err = np.linalg.norm(m.score(x) - fd, axis=1) / np.linalg.norm(fd, axis=1)
        assert err.max() <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_score_is_gradient_of_log_density_random_mixtures(K, D, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(K))
    mu = rng.normal(0, 2, (K, D))
    L = rng.normal(0, 0.5, (K, D, D)) + np.eye(D)
    g = GaussianMixture(w, mu, L @ np.swapaxes(L, 1, 2) + 0.1 * np.eye(D))
    x = rng.normal(0, 2, (5, D))
    fd = fd_grad(g.log_density, x)
    assert np.max(np.linalg.norm(g.score(x) - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-3)) <= 1e-4


def test_degenerate_weights_labels():
    g = GaussianMixture([1.0, 0.0], [[0.0], [5.0]], [[1.0], [1.0]])
    _, labels = g.sample(1000, 3)
    assert np.all(labels == 0)


def test_single_component_sample_mean():
    mu = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    x, _ = gaussian(mu, cov).sample(100000, 7)
    se = np.sqrt(np.diag(cov) / x.shape[0])
    assert np.all(np.abs(x.mean(axis=0) - mu) <= 4 * se)


def test_sample_deterministic(gmm1d):
    a, la = sample(gmm1d, 500, 11)
    b, lb = sample(gmm1d, 500, 11)
    assert np.array_equal(a, b) and np.array_equal(la, lb)


def test_occupancy_matches_weights():
    g = GaussianMixture([0.1, 0.6, 0.3], [[0.0], [1.0], [2.0]], [[1.0], [1.0], [1.0]])
    n = 100000
    _, labels = g.sample(n, 5)
    occ = np.bincount(labels, minlength=3) / n
    se = np.sqrt(g.weights * (1 - g.weights) / n)
    assert np.all(np.abs(occ - g.weights) <= 4 * se)


def test_labeled_samples_valid(gmm1d):
    for s in gmm1d.labeled_samples(50, 1):
        assert 0 <= s.label < gmm1d.n_components and s.point.shape == (1,)


def test_perturbed_marginal_identity_at_zero(gmm1d, vp):
    assert perturbed_marginal(gmm1d, vp, 0) is gmm1d


def test_perturbed_marginal_vp_quarter():
    sched = vp_single_level(0.25)
    m = perturbed_marginal(gaussian([2.0], 1.0), sched, 1)
    assert m.means[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert m.covariances[0, 0, 0] == pytest.approx(1.0, abs=1e-15)
    x0 = np.full(1_000_000, 2.0) + np.random.default_rng(0).standard_normal(1_000_000)
    xt = forward_sample(x0, sched, 1, seed=1)
    n = xt.size
    assert abs(xt.mean() - 1.0) <= 3 * np.sqrt(1.0 / n)
    assert abs(xt.var() - 1.0) <= 3 * np.sqrt(2.0 / n)


def test_perturbed_marginal_ve_adds_variance():
    sched = build_schedule("ve", 2, 2.0, 3.0)
    m = perturbed_marginal(standard_normal(), sched, 1)
    assert m.covariances[0, 0, 0] == pytest.approx(5.0, abs=1e-14)


def test_perturbed_marginal_markov_consistency(vp):
    g = five_mixtures()[3]
    i, j = 200, 700
    mi = perturbed_marginal(g, vp, i)
    ratio = float(np.exp(vp._log_abar[j] - vp._log_abar[i]))
    composed = mi.affine(np.sqrt(ratio), 1.0 - ratio)
    direct = perturbed_marginal(g, vp, j)
    assert np.max(np.abs(composed.means - direct.means)) <= 1e-10
    assert np.max(np.abs(composed.covariances - direct.covariances)) <= 1e-10


def test_dimension_mismatch_raises(gmm1d):
    with pytest.raises(DimensionError):
        symmetric_pair(1.0, dim=2).log_density(np.zeros((3, 3)))


@pytest.mark.parametrize("bad", [
    dict(weights=[0.5, 0.6], means=[[0.0], [1.0]], covariances=[[[1.0]], [[1.0]]]),
    dict(weights=[1.0], means=[[0.0]], covariances=[[[-1.0]]]),
    dict(weights=[1.0], means=[[0.0, 0.0]], covariances=[[[1.0, 0.5], [0.4, 1.0]]]),
])
def test_invalid_mixtures_rejected(bad):
    with pytest.raises(ValueError):
        GaussianMixture(bad["weights"], bad["means"], bad["covariances"])


def test_dict_round_trip(gmm1d):
    g = five_mixtures()[3]
    for m in (gmm1d, g):
        back = GaussianMixture.from_dict(m.to_dict())
        assert np.array_equal(back.means, m.means) and np.array_equal(back.covariances, m.covariances)
