"""Preset experiments.

Each preset declares its sweep axes, its fixed metric columns and its
defaults. ``run_experiment`` walks the cross product of the axis values in
declaration order with seeds innermost and returns one ``ReportRow`` per
(point, seed).
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .. import oracles
from ..channel import ChannelSpec, LinearEncoder, calibrate_power, compose, rayleigh_state
from ..distributions import GaussianMixture, gaussian
from ..engine import ChainStreams, langevin, pf_ode, reverse_sde
from ..flowmatch import GaussianVelocity, fm_loss, fm_transport
from ..guidance import GainFamily, blind_log_posterior
from ..receiver import INIT_SALT, DecoderConfig, ReferenceDecoder, blind_diffcom_decode, diffcom_decode, reference_decode
from ..schedule import build_schedule
from ..score_net import ScoreNetwork, TrainConfig, dsm_loss, score_mse, score_mse_grid, train_dsm
from ..scores import AnalyticScore
from .report import ReportRow


class ExperimentError(RuntimeError):
    """A module error annotated with the parameter point that raised it."""


@dataclass(frozen=True)
class Axis:
    column: str
    section: str
    key: str


@dataclass(frozen=True)
class Preset:
    name: str
    summary: str
    axes: tuple
    metrics: tuple
    defaults: dict
    run_defaults: dict
    plot_metric: str
    fn: object = field(repr=False, default=None)

    @property
    def params(self):
        return tuple(a.column for a in self.axes)

    @property
    def columns(self):
        return ("experiment", "seed") + self.params + self.metrics


def _salted(seed, salt):
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def _source(cfg) -> GaussianMixture:
    return GaussianMixture.from_dict(cfg.source)


def _schedule(cfg):
    s = cfg.schedule
    return build_schedule(s.get("kind", "vp"), s.get("steps", 1000), s.get("start"), s.get("end"))


def _gamma(value, sigma_n):
    if value == "auto":
        if not sigma_n > 0:
            raise ValueError("gamma = \"auto\" needs a noisy channel (finite SNR)")
        return 1.0 / (2.0 * sigma_n**2)
    return float(value)


def _decoder_cfg(cfg, gamma, lam):
    d = cfg.decoder
    return DecoderConfig(gamma=gamma, lam=lam, start_mode=d.get("start_mode", "full"), steps=d.get("steps"),
                         sampler=d.get("sampler", "reverse_sde"), anneal=d.get("anneal", False),
                         step_cap=d.get("step_cap", True),
                         normalize_residual=cfg.guidance.get("normalize_residual", False))


# ---- sampler_fidelity ----

def _sampler_fidelity(cfg, ctx, point, seed):
    """``steps`` drives the PF-ODE solvers only: the reverse SDE walks the
    schedule's own N steps and Langevin runs ``run.langevin_steps``."""
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    n, method, steps = int(run["n_samples"]), point["method"], int(point["steps"])
    score = AnalyticScore(gmm, sched)
    x_T = sched.terminal_std * ChainStreams(seed, n, gmm.dim, salt=INIT_SALT).normal()
    if method == "reverse_sde":
        x = reverse_sde(score, sched, n, seed, gmm.dim).points
    elif method == "langevin":
        init = ChainStreams(seed, n, gmm.dim, salt=INIT_SALT).normal()
        x = langevin(gmm.score, init, float(run["langevin_zeta"]), int(run["langevin_steps"]), seed).points
    else:
        x = pf_ode(score, sched, method, steps, x_T, seed=seed).points
    ref, _ = gmm.sample(n, _salted(seed, 11))
    zm, zv = oracles.moment_z_scores(x, gmm)
    mean, var, _ = oracles.mixture_moments_1d(gmm)
    return {"mean": float(x[:, 0].mean()), "var": float(x[:, 0].var(ddof=1)), "mean_exact": mean,
            "var_exact": var, "mean_z": zm, "var_z": zv, "w1": oracles.w1_1d(x[:, 0], ref[:, 0])}


# ---- dsm_training ----

def _dsm_training(cfg, ctx, point, seed):
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    width = int(run["hidden"])
    net = ScoreNetwork.init(gmm.dim, (width, width), run["activation"], run["embedding"], seed=seed)
    tc = TrainConfig(float(run["learning_rate"]), int(point["steps"]), int(run["batch_size"]), seed)
    trace = []
    trained = train_dsm(net, gmm, sched, tc, trace)
    k = max(1, min(1000, len(trace) // 10))
    ev, probe = int(run["eval_batch"]), _salted(seed, 21)
    return {"loss_first": float(np.mean(trace[:k])), "loss_last": float(np.mean(trace[-k:])),
            "dsm_init": dsm_loss(net, gmm, sched, ev, probe), "dsm_final": dsm_loss(trained, gmm, sched, ev, probe),
            "score_mse": score_mse(trained, gmm, sched, ev, _salted(seed, 22)),
            "score_mse_grid": score_mse_grid(trained, gmm, sched) if gmm.dim == 1 else float("nan")}


# ---- dps_conjugate ----

def _dps_conjugate(cfg, ctx, point, seed):
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    if gmm.n_components != 1 or gmm.dim != 1:
        raise ValueError("dps_conjugate needs a single 1-D Gaussian source")
    a, sn, y = float(run["a"]), float(run["sigma_n"]), float(run["y"])
    gamma = _gamma(point["gamma"], sn)
    op = compose(LinearEncoder([[a]]), ChannelSpec("awgn"), sigma_n=sn)
    dcfg = _decoder_cfg(cfg, gamma, 0.0)
    x = diffcom_decode(np.array([y]), op, AnalyticScore(gmm, sched), sched, dcfg, None, seed,
                       n=int(run["n_chains"])).points[:, 0]
    post = oracles.conjugate_posterior(gmm.means[0], gmm.covariances[0], [[a]], sn, [y])
    tm, tv = float(post.mean[0]), float(post.covariance[0, 0])
    em, ev = oracles.dps_conjugate_moments(sched, float(gmm.covariances[0, 0, 0]), a, sn, y, gamma,
                                           final_noise=dcfg.final_noise)
    m, v = float(x.mean()), float(x.var(ddof=1))
    return {"gamma_used": gamma, "mean": m, "var": v, "target_mean": tm, "target_var": tv,
            "mean_abs_err": abs(m - tm), "var_abs_err": abs(v - tv), "mean_rel_err": abs(m - tm) / abs(tm),
            "var_rel_err": abs(v - tv) / tv, "dps_exact_mean": float(em), "dps_exact_var": float(ev)}


# ---- diffcom_sweep ----

def _operator(cfg, gmm, snr_db, seed):
    ch = cfg.channel
    enc = LinearEncoder(ch.get("encoder") or np.eye(gmm.dim).tolist())
    if enc.in_dim != gmm.dim:
        raise ValueError(f"encoder expects {enc.in_dim}-dim sources, mixture is {gmm.dim}-dim")
    spec = ChannelSpec(ch.get("kind", "awgn"), snr_db, int(ch.get("L", 1)), ch.get("sigma_h"))
    state = rayleigh_state(spec.L, _salted(seed, 31), spec.sigma_h) if spec.kind == "fading" else None
    return compose(enc, spec, state, power_scale=calibrate_power(enc, gmm))


def _diffcom_sweep(cfg, ctx, point, seed):
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    op = _operator(cfg, gmm, float(point["snr_db"]), seed)
    gamma = _gamma(point["gamma"], op.sigma_n)
    n = int(run["n_tx"])
    x, _ = gmm.sample(n, _salted(seed, 41))
    y = op.apply(x, _salted(seed, 42))
    dec = ReferenceDecoder(cfg.decoder.get("reference", "conjugate_mean"), prior=gmm, seed=_salted(seed, 43))
    res = diffcom_decode(y, op, AnalyticScore(gmm, sched), sched, _decoder_cfg(cfg, gamma, float(point["lambda"])),
                         dec, seed, n=n, prior=gmm)
    xh = res.points
    mse, psnr = oracles.mse_psnr(x, xh, float(run["peak"]))
    resid = np.sum((y - op.mean_apply(xh)) ** 2, axis=1)
    q = oracles.FeasibleSetQuery.from_noise(op.out_dim, op.sigma_n)
    ref_mse, _ = oracles.mse_psnr(x, reference_decode(y, op, dec))
    return {"gamma_used": gamma, "sigma_n": op.sigma_n, "mse": mse, "psnr": psnr, "residual": float(resid.mean()),
            "feasible_frac": float(np.mean(resid <= q.epsilon)), "ref_mse": ref_mse,
            "start_step": int(res.start_step), "cbr": op.cbr()}


# ---- blind_gain ----

def _blind_gain(cfg, ctx, point, seed):
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    if gmm.dim != 1:
        raise ValueError("blind_gain runs on a 1-D source")
    sn, h_true = float(run["sigma_n"]), float(point["h_true"])
    gamma = _gamma(point["gamma"], sn)
    h_prior = gaussian(float(run["h_mean"]), float(run["h_var"]))
    family = GainFamily(LinearEncoder([[1.0]]), "scalar", sn)
    x_true, _ = gmm.sample(1, _salted(seed, 51))
    y = family.at([h_true]).apply(x_true, _salted(seed, 52))
    dcfg = _decoder_cfg(cfg, gamma, 0.0)
    res = blind_diffcom_decode(y, family, AnalyticScore(gmm, sched), AnalyticScore(h_prior, sched), sched, sched,
                               dcfg, seed)
    xb, hb = float(res.points[0, 0]), float(res.h[0, 0])
    mis = diffcom_decode(y[0], family.at([float(run["h_mean"])]), AnalyticScore(gmm, sched), sched, dcfg, None,
                         seed).points
    bounds = [run["x_bounds"], run["h_bounds"]]
    res_n = int(run["grid_resolution"])
    (mx, mh), _ = oracles.grid_map(blind_log_posterior(gmm, h_prior, family, y[0]), bounds, res_n)
    in_cell = oracles.grid_cell_index((xb, hb), bounds, res_n) == oracles.grid_cell_index((mx, mh), bounds, res_n)
    true_op = family.at([h_true])
    r_blind = float(np.linalg.norm(y - true_op.mean_apply(res.points)))
    r_mis = float(np.linalg.norm(y - true_op.mean_apply(mis)))
    return {"gamma_used": gamma, "y": float(y[0, 0]), "x_true": float(x_true[0, 0]), "x_hat": xb, "h_hat": hb,
            "map_x": float(mx), "map_h": float(mh), "in_cell": int(in_cell), "residual_blind": r_blind,
            "residual_mismatched": r_mis, "h_abs_err": abs(hb - h_true)}


# ---- flow_transport ----

def _flow_transport(cfg, ctx, point, seed):
    gmm, run = _source(cfg), cfg.run
    if gmm.n_components != 1 or gmm.dim != 1:
        raise ValueError("flow_transport needs a single 1-D Gaussian target")
    m1, v1 = float(gmm.means[0, 0]), float(gmm.covariances[0, 0, 0])
    vel = GaussianVelocity(0.0, 1.0, m1, v1)
    n = int(run["n_samples"])
    x0 = np.random.default_rng(_salted(seed, 61)).standard_normal((n, 1))
    x1 = fm_transport(vel, x0, int(point["steps"]), point["method"])[:, 0]
    ref, _ = gmm.sample(n, _salted(seed, 62))
    floor = ctx.setdefault(("floor", v1), oracles.fm_gaussian_floor(1.0, v1))
    loss = fm_loss(vel, gmm, n, _salted(seed, 63))
    return {"mean": float(x1.mean()), "var": float(x1.var(ddof=1)), "w1": oracles.w1_1d(x1, ref[:, 0]),
            "fm_loss": loss, "fm_floor": floor, "floor_rel_err": abs(loss - floor) / floor}


# ---- solver_convergence ----

def _solver_convergence(cfg, ctx, point, seed):
    gmm, sched, run = _source(cfg), _schedule(cfg), cfg.run
    score = AnalyticScore(gmm, sched)
    n = int(run["n_chains"])
    x_T = sched.terminal_std * ChainStreams(seed, n, gmm.dim, salt=INIT_SALT).normal()
    key = ("ref", seed)
    if key not in ctx:
        ctx[key] = pf_ode(score, sched, "rk4", int(run["ref_steps"]), x_T).points
    x = pf_ode(score, sched, point["method"], int(point["steps"]), x_T, seed=seed).points
    err = np.abs(x - ctx[key])
    return {"max_abs_err": float(err.max()), "mean_abs_err": float(err.mean())}


_GMM_1D = {"weights": [0.3, 0.7], "means": [[-1.0], [2.0]], "cov_diag": [[0.5], [1.5]]}
_VP = {"kind": "vp", "steps": 1000, "start": 1e-4, "end": 0.02}

PRESETS = {
    "sampler_fidelity": Preset(
        "sampler_fidelity", "moments and W1 of each sampler against the source mixture",
        (Axis("method", "run", "method"), Axis("steps", "run", "steps")),
        ("mean", "var", "mean_exact", "var_exact", "mean_z", "var_z", "w1"),
        {"source": _GMM_1D, "schedule": _VP},
        {"method": ["reverse_sde", "langevin", "euler", "rk4", "predictor_corrector"], "steps": [1000],
         "n_samples": 100000, "langevin_zeta": 0.01, "langevin_steps": 5000},
        "w1", _sampler_fidelity),
    "dsm_training": Preset(
        "dsm_training", "train the score network by DSM and score it against the analytic score",
        (Axis("steps", "run", "steps"),),
        ("loss_first", "loss_last", "dsm_init", "dsm_final", "score_mse", "score_mse_grid"),
        {"source": {"weights": [1.0], "means": [[0.0]], "cov_diag": [[1.0]]}, "schedule": _VP},
        {"steps": [20000], "learning_rate": 1e-3, "batch_size": 256, "hidden": 32, "activation": "tanh",
         "embedding": "sinusoidal", "eval_batch": 200000},
        "score_mse", _dsm_training),
    "dps_conjugate": Preset(
        "dps_conjugate", "DPS on the scalar conjugate Gaussian benchmark against the exact posterior",
        (Axis("gamma", "decoder", "gamma"),),
        ("gamma_used", "mean", "var", "target_mean", "target_var", "mean_abs_err", "var_abs_err", "mean_rel_err",
         "var_rel_err", "dps_exact_mean", "dps_exact_var"),
        {"source": {"weights": [1.0], "means": [[0.0]], "cov_diag": [[1.0]]}, "schedule": _VP,
         "decoder": {"gamma": "auto"}},
        {"a": 1.0, "sigma_n": 1.0, "y": 2.0, "n_chains": 10000},
        "mean_abs_err", _dps_conjugate),
    "diffcom_sweep": Preset(
        "diffcom_sweep", "guided receiver MSE over channel SNR and guidance weights",
        (Axis("snr_db", "channel", "snr_db"), Axis("gamma", "decoder", "gamma"), Axis("lambda", "decoder", "lambda")),
        ("gamma_used", "sigma_n", "mse", "psnr", "residual", "feasible_frac", "ref_mse", "start_step", "cbr"),
        {"source": {"weights": [0.25, 0.25, 0.25, 0.25],
                    "means": [[-2.0, -2.0], [-2.0, 2.0], [2.0, -2.0], [2.0, 2.0]],
                    "cov_diag": [[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]},
         "schedule": _VP,
         "channel": {"kind": "awgn", "snr_db": [0.0, 5.0, 10.0, 15.0, 20.0], "L": 1,
                     "encoder": [[1.0, 0.4], [0.3, 0.8]]},
         "decoder": {"gamma": "auto", "lambda": 0.0, "reference": "conjugate_mean"}},
        {"n_tx": 256, "peak": 1.0},
        "mse", _diffcom_sweep),
    "blind_gain": Preset(
        "blind_gain", "joint source and scalar-gain decoding against the grid MAP and a fixed-gain decoder",
        (Axis("gamma", "decoder", "gamma"), Axis("h_true", "run", "h_true")),
        ("gamma_used", "y", "x_true", "x_hat", "h_hat", "map_x", "map_h", "in_cell", "residual_blind",
         "residual_mismatched", "h_abs_err"),
        {"source": {"weights": [1.0], "means": [[0.0]], "cov_diag": [[1.0]]}, "schedule": _VP,
         "decoder": {"gamma": "auto"}},
        {"h_true": [1.5], "h_mean": 1.0, "h_var": 0.1, "sigma_n": 0.05, "x_bounds": [-5.0, 5.0],
         "h_bounds": [0.0, 3.0], "grid_resolution": 401},
        "residual_blind", _blind_gain),
    "flow_transport": Preset(
        "flow_transport", "exact-velocity transport N(0,1) to a Gaussian target and the FM loss floor",
        (Axis("method", "run", "method"), Axis("steps", "run", "steps")),
        ("mean", "var", "w1", "fm_loss", "fm_floor", "floor_rel_err"),
        {"source": {"weights": [1.0], "means": [[0.0]], "cov_diag": [[4.0]]}},
        {"method": ["euler", "rk4"], "steps": [5, 10, 20, 50, 100], "n_samples": 100000},
        "w1", _flow_transport),
    "solver_convergence": Preset(
        "solver_convergence", "PF-ODE endpoint error of each solver against a fine RK4 solve",
        (Axis("method", "run", "method"), Axis("steps", "run", "steps")),
        ("max_abs_err", "mean_abs_err"),
        {"source": _GMM_1D, "schedule": _VP},
        {"method": ["euler", "rk4"], "steps": [25, 50, 100, 200], "n_chains": 200, "ref_steps": 4000},
        "max_abs_err", _solver_convergence),
}


def sweep_points(cfg, preset: Preset | None = None):
    """Parameter points in cross-product order (first axis outermost)."""
    preset = preset or PRESETS[cfg.experiment]
    values = []
    for ax in preset.axes:
        v = cfg.section(ax.section).get(ax.key)
        if v is None:
            raise ExperimentError(f"{cfg.experiment}: missing value for {ax.section}.{ax.key}")
        values.append(v if isinstance(v, list) else [v])
    return [dict(zip(preset.params, combo)) for combo in itertools.product(*values)]


def run_experiment(cfg) -> list:
    preset = PRESETS[cfg.experiment]
    rows, ctx = [], {}
    for point in sweep_points(cfg, preset):
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            try:
                metrics = preset.fn(cfg, ctx, point, int(seed))
            except Exception as exc:
                where = ", ".join(f"{k}={v}" for k, v in point.items())
                raise ExperimentError(f"{cfg.experiment} failed at {where}, seed={seed}: {exc}") from exc
            runtime = 1e3 * (time.perf_counter() - t0)
            rows.append(ReportRow(cfg.experiment, int(seed), dict(point), {m: metrics[m] for m in preset.metrics},
                                  runtime))
    return rows
