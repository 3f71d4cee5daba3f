import numpy as np
import pytest

from diffcom_sim.distributions import perturbed_marginal, standard_normal, symmetric_pair
from diffcom_sim.schedule import build_schedule, vp_single_level
from diffcom_sim.score_net import (ScoreNetwork, TrainConfig, TrainingDiverged, dsm_loss, dsm_loss_grad,
                                   embed_time, eps_from_score, grad_check, ism_loss, ism_loss_grad, load_network,
                                   net_eval, save_network, score_from_eps, train_dsm)


def minus_x_net(dim=1, embedding="sinusoidal"):
    """One identity layer computing -x exactly (time features get zero weight)."""
    from diffcom_sim.score_net import embed_width

    W = np.zeros((dim, dim + embed_width(embedding)))
    W[:, :dim] = -np.eye(dim)
    return ScoreNetwork([W], [np.zeros(dim)], "identity", embedding)


def test_zero_network_outputs_zero():
    net = ScoreNetwork.init(2, zero=True)
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert np.all(net_eval(net, x, 0.3) == 0.0)


def test_eval_deterministic():
    net = ScoreNetwork.init(2, seed=3)
    x = np.random.default_rng(1).normal(size=(5, 2))
    assert np.array_equal(net_eval(net, x, 0.7), net_eval(net, x, 0.7))


def test_single_linear_layer_identity_activation():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(2, 6))
    net = ScoreNetwork([W], [np.zeros(2)], "identity", "sinusoidal")
    x = rng.normal(size=(4, 2))
    inp = np.concatenate([x, embed_time(0.4, 4, "sinusoidal")], axis=1)
    assert np.allclose(net_eval(net, x, 0.4), inp @ W.T, rtol=0, atol=1e-15)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        net_eval(ScoreNetwork.init(2), np.zeros((3, 3)), 0.1)


def test_grad_check_zero_network():
    assert grad_check(ScoreNetwork.init(2, zero=True), np.ones((3, 2)), 0.5) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_random_networks(seed):
    net = ScoreNetwork.init(2, (32, 32), seed=seed)
    x = np.random.default_rng(100 + seed).normal(size=(4, 2))
    assert grad_check(net, x, 0.37, 1e-5) <= 1e-4


def test_grad_check_larger_step_has_larger_error():
    net = ScoreNetwork.init(1, (32, 32), "tanh", seed=4)
    x = np.random.default_rng(4).normal(size=(6, 1))
    assert grad_check(net, x, 0.2, 1e-3) >= grad_check(net, x, 0.2, 1e-5)


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        grad_check(ScoreNetwork.init(1), np.zeros((1, 1)), 0.1, 1e-2)


def test_dsm_loss_closed_form():
    # marginal of N(0,1) under VP is N(0,1) at every level, so -x is the exact score
    sched = vp_single_level(0.5)
    vals = []
    for seed in range(4):
        vals.append(dsm_loss(lambda x, t: -x, standard_normal(), sched, 250_000, seed))
    est = np.mean(vals)
    # per-sample loss 0.5*(sqrt(a) x0 + (s - 1/s) eps)^2 has variance 0.5 * 1 = 0.5 here
    se = np.sqrt(0.5 / 1_000_000)
    assert abs(est - 0.5) <= 4 * se


def test_dsm_loss_min_sigma_finite_nonnegative():
    sched = build_schedule("vp", 1, 1e-6, 1e-6)
    val = dsm_loss(ScoreNetwork.init(1, seed=0), standard_normal(), sched, 1000, 0)
    assert np.isfinite(val) and val >= 0


def test_dsm_loss_deterministic(vp):
    net = ScoreNetwork.init(1, seed=1)
    assert dsm_loss(net, standard_normal(), vp, 512, 9) == dsm_loss(net, standard_normal(), vp, 512, 9)


def test_ism_analytic_standard_normal():
    x = np.random.default_rng(0).standard_normal((1_000_000, 1))
    val = ism_loss(minus_x_net(), x, 0.0)
    # 0.5 x^2 - 1 has variance 0.5
    assert abs(val + 0.5) <= 4 * np.sqrt(0.5 / x.shape[0])


def test_ism_zero_network_is_zero():
    x = np.random.default_rng(0).standard_normal((100, 2))
    assert ism_loss(ScoreNetwork.init(2, zero=True), x) == 0.0


def test_ism_plus_constant_is_fisher_divergence_zero_at_optimum():
    grid = np.linspace(-12, 12, 20001)
    w = np.exp(standard_normal().log_density(grid[:, None])) * (grid[1] - grid[0])
    ism = ism_loss(minus_x_net(), grid[:, None], 0.0, w)
    # Fisher divergence = ISM + 0.5 E|s_data|^2, with 0.5 E x^2 = 0.5 by quadrature
    assert abs(ism + 0.5 * np.sum(w * grid**2)) <= 1e-9


def test_ism_rejects_high_dimension():
    with pytest.raises(ValueError):
        ism_loss(ScoreNetwork.init(4), np.zeros((2, 4)))


def test_ism_gradient_matches_finite_differences():
    net = ScoreNetwork.init(2, (8, 8), "softplus", seed=5)
    x = np.random.default_rng(5).normal(size=(16, 2))
    _, g = ism_loss_grad(net, x, 0.3)
    theta = net.flat()
    h = 1e-6
    for j in np.random.default_rng(0).choice(theta.size, 25, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        fd = (ism_loss(net.with_flat(tp), x, 0.3) - ism_loss(net.with_flat(tm), x, 0.3)) / (2 * h)
        assert abs(fd - g[j]) <= 1e-6 * max(1.0, abs(fd))


def dsm_ism_gradients(seed=0):
    gmm = symmetric_pair(1.5, 0.5)
    sched = vp_single_level(0.5)
    net = ScoreNetwork.init(1, (16, 16), "tanh", seed=seed)
    g_dsm = np.mean([dsm_loss_grad(net, gmm, sched, 250_000, seed * 10 + k)[1] for k in range(4)], axis=0)
    grid = np.linspace(-12, 12, 20001)
    marg = perturbed_marginal(gmm, sched, 1)
    w = np.exp(marg.log_density(grid[:, None])) * (grid[1] - grid[0])
    _, g_ism = ism_loss_grad(net, grid[:, None], 1.0, w)
    return g_dsm, g_ism


def test_dsm_and_ism_gradients_agree():
    g_dsm, g_ism = dsm_ism_gradients()
    assert np.linalg.norm(g_dsm - g_ism) / np.linalg.norm(g_ism) <= 0.05


def test_eps_score_identity_exact():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(50, 3))
    sig = rng.uniform(0.01, 3.0, (50, 1))
    assert np.array_equal(eps_from_score(s, sig), -sig * s)
    assert np.allclose(score_from_eps(eps_from_score(s, sig), sig), s, rtol=1e-15, atol=0)


def test_train_reproducible(vp):
    net = ScoreNetwork.init(1, seed=0)
    cfg = TrainConfig(1e-3, 200, 64, seed=3)
    a = train_dsm(net, standard_normal(), vp, cfg)
    b = train_dsm(net, standard_normal(), vp, cfg)
    assert np.array_equal(a.flat(), b.flat())


def test_train_divergence_aborts(vp):
    net = ScoreNetwork.init(1, seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train_dsm(net, standard_normal(), vp, TrainConfig(1e6, 200, 64, seed=0))
    assert info.value.step < 200


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)


def test_save_load_round_trip(tmp_path):
    net = ScoreNetwork.init(2, (8, 5), "silu", "scalar", seed=9)
    p = tmp_path / "net.bin"
    save_network(net, p)
    back = load_network(p)
    assert back.activation == "silu" and back.embedding == "scalar"
    assert np.array_equal(back.flat(), net.flat())
    raw = np.fromfile(p, dtype="<f8")
    assert raw[0] == 1.0 and raw[3] == 3  # version, layer count


@pytest.mark.slow
def test_train_standard_normal_benchmark():
    from diffcom_sim.score_net import score_mse_grid

    sched = build_schedule("vp", 1000)
    net = ScoreNetwork.init(1, (32, 32), "tanh", seed=0)
    trace = []
    trained = train_dsm(net, standard_normal(), sched, TrainConfig(1e-3, 20_000, 256, seed=0), trace)
    assert score_mse_grid(trained, standard_normal(), sched) <= 0.05
    assert np.mean(trace[-1000:]) < np.mean(trace[:1000])
