import numpy as np
import pytest

from diffcom_sim.distributions import GaussianMixture, standard_normal, symmetric_pair
from diffcom_sim.engine import (ChainStreams, NonFiniteStateError, SampleBatch, ZeroNoise, forward_sample, langevin,
                                pf_ode, reverse_sde, tweedie, write_trajectory_csv)
from diffcom_sim.oracles import conjugate_posterior, moment_z_scores
from diffcom_sim.schedule import ScheduleError, build_schedule, vp_single_level
from diffcom_sim.scores import AnalyticScore


def test_vp_schedule_first_and_terminal(vp):
    abar = vp.alpha_bars
    assert abar[0] == 1 - 1e-4
    assert abar[-1] <= 1e-4
    assert np.all(np.diff(abar) < 0)


def test_ve_schedule_endpoints():
    s = build_schedule("ve", 100, 0.01, 10.0)
    assert s.sigma_step(1) == 0.01 and s.sigma_step(100) == 10.0
    assert all(s.sigma_step(i) < s.sigma_step(i + 1) for i in range(1, 100))


@pytest.mark.parametrize("args", [("vp", 10, 0.5, 0.1), ("vp", 10, 0.0, 0.02), ("vp", 10, 1e-4, 1.0),
                                  ("ve", 10, 2.0, 1.0), ("xx", 10, 0.1, 0.2)])
def test_invalid_schedule(args):
    with pytest.raises((ScheduleError, ValueError)):
        build_schedule(*args)


def test_forward_sample_injected_ones():
    sched = vp_single_level(0.9)
    out = forward_sample(np.zeros(3), sched, 1, eps=np.ones(3))
    assert np.allclose(out, np.sqrt(0.1), rtol=0, atol=1e-15)


def test_forward_sample_vp_moments(vp):
    x0 = np.array([1.5, -0.5])
    i = 300
    xs = forward_sample(np.broadcast_to(x0, (1_000_000, 2)), vp, i, seed=3)
    a, s = vp.alpha(i), vp.sigma(i)
    n = xs.shape[0]
    assert np.all(np.abs(xs.mean(0) - a * x0) <= 3 * s / np.sqrt(n))
    assert np.all(np.abs(xs.var(0, ddof=1) - s**2) <= 3 * s**2 * np.sqrt(2 / n))


def test_forward_sample_ve_moments():
    sched = build_schedule("ve", 2, 2.0, 4.0)
    xs = forward_sample(np.full(1_000_000, 5.0), sched, 1, seed=4)
    n = xs.size
    assert abs(xs.mean() - 5.0) <= 3 * 2 / np.sqrt(n)
    assert abs(xs.var(ddof=1) - 4.0) <= 3 * 4 * np.sqrt(2 / n)


def test_forward_sample_rejects_step_zero(vp):
    with pytest.raises(ValueError):
        forward_sample(np.zeros(1), vp, 0, seed=0)


def test_langevin_fixed_point_without_noise():
    score = lambda x: -x
    out = langevin(score, np.zeros((5, 1)), 0.1, 100, streams=ZeroNoise(5, 1))
    assert np.all(out.points == 0.0)


def test_langevin_stationary_moments():
    out, trace = langevin(lambda x: -x, np.zeros((1000, 1)), 1e-3, 50_000, seed=5, trace_every=100)
    pooled = trace[100:].ravel()  # drop the first 10k steps as burn-in
    assert abs(pooled.mean()) <= 0.02
    assert 0.95 <= pooled.var() <= 1.05
    assert out.points.shape == (1000, 1)


@pytest.mark.parametrize("zeta", [0.0, -1e-3])
def test_langevin_rejects_nonpositive_step(zeta):
    with pytest.raises(ValueError):
        langevin(lambda x: -x, np.zeros((2, 1)), zeta, 10)


def test_langevin_nonfinite_aborts():
    with pytest.raises(NonFiniteStateError):
        langevin(lambda x: x * 1e300, np.ones((2, 1)), 1.0, 10, seed=0)


def test_reverse_sde_standard_normal(vp):
    n = 100_000
    out = reverse_sde(AnalyticScore(standard_normal(), vp), vp, n, seed=11).points[:, 0]
    assert abs(out.mean()) <= 4 / np.sqrt(n)
    assert 0.95 <= out.var() <= 1.05


def test_reverse_sde_symmetric_mode_mass(vp):
    out = reverse_sde(AnalyticScore(symmetric_pair(3.0, 1.0), vp), vp, 20_000, seed=12).points[:, 0]
    assert 0.47 <= np.mean(out > 0) <= 0.53


def test_reverse_sde_ve_gaussian():
    sched = build_schedule("ve", 1000)
    out = reverse_sde(AnalyticScore(standard_normal(), sched), sched, 20_000, seed=2).points[:, 0]
    assert abs(out.mean()) <= 4 / np.sqrt(out.size)
    assert 0.95 <= out.var() <= 1.05


def test_reverse_sde_deterministic(vp):
    sf = AnalyticScore(symmetric_pair(3.0), vp)
    a = reverse_sde(sf, vp, 300, seed=7).points
    b = reverse_sde(sf, vp, 300, seed=7).points
    assert np.array_equal(a, b)
    assert not np.array_equal(a, reverse_sde(sf, vp, 300, seed=8).points)


def test_chain_streams_independent_of_batch_size():
    small = ChainStreams(3, 10, 2).normal()
    big = ChainStreams(3, 5000, 2).normal()
    assert np.array_equal(small, big[:10])


def test_reverse_sde_nonfinite_reports_step(vp):
    with pytest.raises(NonFiniteStateError) as info:
        reverse_sde(lambda x, i: np.full_like(x, np.inf) if i == 500 else -x, vp, 4, seed=0)
    assert info.value.step == 500


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_pf_ode_constant_trajectory(vp, method):
    xT = np.random.default_rng(0).standard_normal((50, 2))
    sf = AnalyticScore(standard_normal(2), vp)
    out = pf_ode(sf, vp, method, 100, xT, keep_trajectory=True)
    assert np.max(np.abs(out.trajectory - xT[None])) <= 1e-12


def test_pf_ode_pc_predictor_is_constant(vp):
    # the corrector is a noisy Langevin move, so only its vanishing-step limit is constant
    xT = np.random.default_rng(1).standard_normal((20, 1))
    sf = AnalyticScore(standard_normal(), vp)
    out = pf_ode(sf, vp, "predictor_corrector", 50, xT, snr_ratio=1e-300)
    assert np.max(np.abs(out.points - xT)) <= 1e-12


def test_rk4_beats_euler_against_fine_reference(vp, gmm1d):
    sf = AnalyticScore(gmm1d, vp)
    xT = np.random.default_rng(3).standard_normal((100, 1))
    ref = pf_ode(sf, vp, "euler", 5000, xT).points
    rk = pf_ode(sf, vp, "rk4", 50, xT).points
    eu = pf_ode(sf, vp, "euler", 50, xT).points
    assert np.max(np.abs(rk - ref)) <= 1e-3
    assert np.max(np.abs(eu - ref)) > np.max(np.abs(rk - ref))


def test_rk4_convergence_order(vp, gmm1d):
    sf = AnalyticScore(gmm1d, vp)
    xT = np.random.default_rng(4).standard_normal((100, 1))
    ref = pf_ode(sf, vp, "rk4", 3200, xT).points
    errs = [np.max(np.abs(pf_ode(sf, vp, "rk4", k, xT).points - ref)) for k in (25, 50, 100)]
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_pf_ode_and_reverse_sde_moments_agree(vp, gmm1d):
    n = 20_000
    sf = AnalyticScore(gmm1d, vp)
    rev = reverse_sde(sf, vp, n, seed=21).points[:, 0]
    xT = np.random.default_rng(22).standard_normal((n, 1))
    pf = pf_ode(sf, vp, "rk4", 200, xT).points[:, 0]
    se_m = np.sqrt(rev.var() / n + pf.var() / n)
    assert abs(rev.mean() - pf.mean()) <= 3 * se_m
    _, var, m4 = 0, rev.var(), np.mean((rev - rev.mean()) ** 4)
    se_v = np.sqrt(2 * (m4 - var**2) / n)
    assert abs(rev.var() - pf.var()) <= 3 * se_v


def test_pf_ode_rejects_bad_method(vp):
    with pytest.raises(ValueError):
        pf_ode(lambda x, t: -x, vp, "heun", 10, np.zeros((1, 1)))


def test_tweedie_standard_normal_example():
    sched = vp_single_level(0.25)
    sf = AnalyticScore(standard_normal(), sched)
    xhat = tweedie(np.array([[2.0]]), 1, sf, sched)
    assert abs(xhat[0, 0] - 1.0) <= 1e-14
    post = conjugate_posterior([0.0], [[1.0]], [[0.5]], np.sqrt(0.75), [2.0])
    assert abs(xhat[0, 0] - post.mean[0]) <= 1e-14


def test_tweedie_minimal_noise_is_identity():
    sched = vp_single_level(1 - 1e-12)
    sf = AnalyticScore(GaussianMixture([1.0], [[0.3]], [[0.7]]), sched)
    x = np.array([[1.2], [-0.4]])
    assert np.allclose(tweedie(x, 1, sf, sched), x, atol=1e-10)


def test_tweedie_ve_form():
    sched = build_schedule("ve", 2, 1.0, 2.0)
    sf = AnalyticScore(standard_normal(), sched)
    x = np.array([[3.0]])
    # posterior mean of x0 ~ N(0,1) given x0 + N(0, 4) = 3 is 3/5
    assert abs(tweedie(x, 2, sf, sched)[0, 0] - 0.6) <= 1e-14


def test_tweedie_slope_matches_regression():
    sched = vp_single_level(0.25)
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal(1_000_000)
    xt = forward_sample(x0, sched, 1, seed=10)
    slope_mc = np.polyfit(xt, x0, 1)[0]
    sf = AnalyticScore(standard_normal(), sched)
    slope = tweedie(np.array([[1.0]]), 1, sf, sched)[0, 0] - tweedie(np.array([[0.0]]), 1, sf, sched)[0, 0]
    assert abs(slope - slope_mc) / slope_mc <= 0.01


def test_trajectory_csv(tmp_path, vp):
    xT = np.array([[0.5, -1.0], [2.0, 0.0]])
    out = pf_ode(AnalyticScore(standard_normal(2), vp), vp, "euler", 3, xT, keep_trajectory=True)
    p = tmp_path / "traj.csv"
    write_trajectory_csv(out.trajectory, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "chain,step,coordinate,value"
    assert len(lines) == 1 + 4 * 2 * 2
    assert lines[1] == "0,0,0,0.5"


def test_sample_batch_rejects_nonfinite():
    with pytest.raises(NonFiniteStateError):
        SampleBatch(np.array([[np.nan]]))


def test_moment_z_scores_helper(gmm1d):
    z_m, z_v = moment_z_scores(gmm1d.sample(200_000, 0)[0], gmm1d)
    assert abs(z_m) <= 4 and abs(z_v) <= 4
