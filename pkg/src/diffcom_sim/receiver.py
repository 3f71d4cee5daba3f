"""Measurement-guided diffusion receiver.

The guided score at step i is

    s(x_t) - gamma * grad ||y - A(x_hat)||^2 - lambda * grad ||x_ref - x_tilde||^2

with ``x_hat`` the Tweedie estimate, ``x_ref`` the reference reconstruction of
the received ``y`` and ``x_tilde`` the reference decoder applied to the
noiseless round trip ``A(x_hat)`` (the decoders equalize with the channel
pseudo-inverse first, so this is ``D(H^+ H E x_hat)``).

Step cap: an explicit guided step of size ``delta * gamma`` can overshoot the
residual minimum and blow up for large gamma. With ``step_cap`` on, gamma is
clipped per chain to ``kappa / delta`` where ``kappa`` is the Gauss-Newton
step along the guidance direction predicted from the Tweedie Jacobian. When
the cap is inactive the update is the plain guided step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .engine import METHODS, ChainStreams, NonFiniteStateError, pf_ode, SampleBatch, tweedie
from .schedule import NoiseSchedule, VP
from .scores import as_batch, score_jacobian

SAMPLERS = ("reverse_sde",) + METHODS
DECODER_KINDS = ("pseudo_inverse", "conjugate_mean", "trained_linear")
INIT_SALT = 1_000_003
GAIN_SALT = 2
GAIN_INIT_SALT = 1_000_004


@dataclass(frozen=True)
class DecoderConfig:
    gamma: float = 0.5
    lam: float = 0.0
    start_mode: str = "full"
    steps: int | None = None
    sampler: str = "reverse_sde"
    anneal: bool = False
    step_cap: bool = True
    normalize_residual: bool = False
    final_noise: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0 and np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("gamma and lambda must be finite and >= 0")
        if self.start_mode not in ("full", "adaptive"):
            raise ValueError(f"start_mode must be full or adaptive, got {self.start_mode!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")


# ---- reference decoders ----

@dataclass
class ReferenceDecoder:
    """Affine decoder x = W y + c fitted to a forward operator.

    ``prior`` (a GaussianMixture) is needed by ``conjugate_mean`` (moment
    matched) and ``trained_linear`` (training pairs).
    """

    kind: str = "pseudo_inverse"
    prior: object = None
    n_train: int = 20000
    seed: int = 0
    _fits: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in DECODER_KINDS:
            raise ValueError(f"unknown reference decoder {self.kind!r}")
        if self.kind != "pseudo_inverse" and self.prior is None:
            raise ValueError(f"{self.kind} decoder needs a prior")

    def fit(self, op):
        key = id(op)
        if key not in self._fits:
            self._fits[key] = (op, self._fit(op))
        return self._fits[key][1]

    def _fit(self, op):
        if self.kind == "pseudo_inverse":
            if not op.linear:
                raise TypeError("pseudo-inverse reference needs a linear operator")
            B = op.power_scale * op.encoder.matrix
            Bp = np.linalg.pinv(B)
            W = Bp @ op.channel_pinv()
            b = getattr(op.encoder, "bias", None)
            c = np.zeros(op.in_dim) if b is None else -Bp @ (op.power_scale * b)
            return W, c
        if self.kind == "conjugate_mean":
            if not op.linear:
                raise TypeError("conjugate-mean reference needs a linear operator")
            mu, S = self.prior.mean(), self.prior.covariance()
            A = op.matrix()
            K = S @ A.T @ np.linalg.pinv(A @ S @ A.T + op.sigma_n**2 * np.eye(A.shape[0]))
            return K, mu - K @ (A @ mu + op.offset())
        x, _ = self.prior.sample(self.n_train, self.seed)
        y = op.apply(x, self.seed + 1)
        Y = np.hstack([y, np.ones((y.shape[0], 1))])
        beta, *_ = np.linalg.lstsq(Y, x, rcond=None)
        return beta[:-1].T, beta[-1]


def reference_decode(y, op, dec: ReferenceDecoder):
    W, c = dec.fit(op)
    y = np.asarray(y, dtype=float)
    out = y @ W.T + c
    return out


def reference_error(op, dec: ReferenceDecoder, prior, seed: int = 0, n_probe: int = 4096) -> float:
    """Normalized reference error: mean over coordinates of MSE / prior variance."""
    var = np.diag(prior.covariance())
    if op.linear:
        W, c = dec.fit(op)
        A = op.matrix()
        mu, S = prior.mean(), prior.covariance()
        G = W @ A - np.eye(op.in_dim)
        m_e = G @ mu + W @ op.offset() + c
        C_e = G @ S @ G.T + op.sigma_n**2 * W @ W.T
        mse = np.diag(C_e) + m_e**2
    else:
        x, _ = prior.sample(n_probe, seed)
        xr = reference_decode(op.apply(x, seed + 1), op, dec)
        mse = np.mean((xr - x) ** 2, axis=0)
    return float(np.mean(mse / var))


def start_index(v_hat: float, sched: NoiseSchedule) -> int:
    """Smallest i with 1 - abar_i >= v_hat, clipped to [1, N]."""
    if sched.kind != VP:
        raise ValueError("adaptive start needs a VP schedule")
    noise = -np.expm1(sched._log_abar[1:])
    hit = np.nonzero(noise >= v_hat)[0]
    return int(hit[0] + 1) if hit.size else sched.steps


def adaptive_start(y, op, sched: NoiseSchedule, dec: ReferenceDecoder, prior=None, seed: int = 0, n: int = 1):
    """Start step and initial state built from the reference reconstruction.

    Returns ``(i_star, init (n, D), x_ref (n, D))``.
    """
    prior = dec.prior if prior is None else prior
    v_hat = reference_error(op, dec, prior, seed)
    i = start_index(v_hat, sched)
    x_ref = np.broadcast_to(reference_decode(np.atleast_2d(y), op, dec), (n, op.in_dim)).copy()
    eps = ChainStreams(seed, n, op.in_dim, salt=INIT_SALT).normal()
    a = float(sched.alpha(i))
    s = float(sched.sigma(i))
    return i, a * x_ref + s * eps, x_ref


# ---- guided decoding ----

@dataclass
class DecodeResult:
    points: np.ndarray
    start_step: int
    diagnostics: np.ndarray
    h: np.ndarray | None = None

    def write_diagnostics(self, path):
        write_diagnostics_csv(self.diagnostics, path)


DIAG_COLUMNS = ("step", "residual_norm", "confirming_norm", "state_norm")


def write_diagnostics_csv(diag, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_COLUMNS)
        for row in np.asarray(diag):
            w.writerow([format(float(v), ".17g") for v in row])


def _step_size(sched, i):
    if sched.kind == VP:
        b = sched.beta(i)
        return b / np.sqrt(1.0 - b)
    return sched.sigma_step(i) ** 2 - sched.sigma_step(i - 1) ** 2


def _tweedie_parts(scorefn, sched, x, tau):
    a = float(sched.alpha(tau))
    s2 = float(sched.sigma(tau)) ** 2
    s = np.asarray(scorefn(x, tau)).reshape(x.shape)
    J = score_jacobian(scorefn, x, tau)
    return s, (x + s2 * s) / a, (np.eye(x.shape[1])[None] + s2 * J) / a


def _gn_cap(r, v, gamma, delta):
    """Per-chain gamma clipped at the Gauss-Newton optimum kappa / delta."""
    vv = np.sum(v * v, axis=1)
    kappa = np.divide(np.sum(r * v, axis=1), vv, out=np.full(vv.shape, np.inf), where=vv > 0)
    kappa = np.where(kappa > 0, kappa, np.inf)
    return np.minimum(gamma, kappa / delta)[:, None]


class _Guided:
    """Guided score with diagnostics; ``delta`` is the current guidance step size."""

    def __init__(self, prior_score, op, y, sched, cfg, x_ref, W, c, start):
        self.prior_score, self.op, self.sched, self.cfg = prior_score, op, sched, cfg
        self.y = np.asarray(y, dtype=float)
        self.x_ref, self.W, self.c, self.start = x_ref, W, c, start
        self.delta = None
        self.rows = []

    def weight(self, tau):
        if not self.cfg.anneal:
            return 1.0
        return 1.0 - (float(tau) - 1.0) / self.start

    def __call__(self, x, tau):
        cfg = self.cfg
        s, xh, Jt = _tweedie_parts(self.prior_score, self.sched, x, tau)
        Ax = self.op.mean_apply(xh)
        r = self.y - Ax
        u = 2.0 * self.op.vjp(xh, r)
        g = np.einsum("nji,nj->ni", Jt, u)
        if cfg.normalize_residual:
            nr = np.linalg.norm(r, axis=1, keepdims=True)
            g = np.divide(g, nr, out=np.zeros_like(g), where=nr > 0)
        gamma = cfg.gamma
        if cfg.step_cap and self.delta is not None and cfg.gamma > 0:
            v = self.op.jvp(xh, np.einsum("nij,nj->ni", Jt, g))
            gamma = _gn_cap(r, v, cfg.gamma, self.delta * self.weight(tau))
        conf = np.zeros(x.shape[0])
        out = s + self.weight(tau) * gamma * g
        if self.x_ref is not None:
            x_tilde = Ax @ self.W.T + self.c
            d = self.x_ref - x_tilde
            conf = np.linalg.norm(d, axis=1)
            if cfg.lam > 0:
                uc = 2.0 * self.op.vjp(xh, d @ self.W)
                out = out + self.weight(tau) * cfg.lam * np.einsum("nji,nj->ni", Jt, uc)
        self.rows.append((float(tau), np.mean(np.linalg.norm(r, axis=1)), np.mean(conf),
                          np.mean(np.linalg.norm(x, axis=1))))
        return out


def diffcom_decode(y, op, prior_score, sched: NoiseSchedule, cfg: DecoderConfig, dec: ReferenceDecoder | None,
                   seed: int, n: int = 1, prior=None) -> DecodeResult:
    """Decode ``y`` (shared ``(m,)`` or per-chain ``(n, m)``) with ``n`` chains."""
    D = op.in_dim
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[0] != n:
        n = y.shape[0]
    need_ref = dec is not None and (cfg.lam > 0 or cfg.start_mode == "adaptive")
    if cfg.start_mode == "adaptive":
        if dec is None:
            raise ValueError("adaptive start needs a reference decoder")
        if y.ndim == 2:
            start, _, x_ref = adaptive_start(y[:1], op, sched, dec, prior, seed, 1)
            x_ref = reference_decode(y, op, dec)
            a, s = float(sched.alpha(start)), float(sched.sigma(start))
            x = a * x_ref + s * ChainStreams(seed, n, D, salt=INIT_SALT).normal()
        else:
            start, x, x_ref = adaptive_start(y, op, sched, dec, prior, seed, n)
    else:
        start = sched.steps
        x = sched.terminal_std * ChainStreams(seed, n, D, salt=INIT_SALT).normal()
        x_ref = np.broadcast_to(reference_decode(np.atleast_2d(y), op, dec), (n, D)) if need_ref else None
    W, c = dec.fit(op) if need_ref else (None, None)
    g = _Guided(prior_score, op, y, sched, cfg, x_ref, W, c, start)
    if cfg.sampler == "reverse_sde":
        if cfg.steps not in (None, sched.steps):
            raise ValueError("the reverse SDE runs on the schedule's own steps")
        noise = ChainStreams(seed, n, D)
        for i in range(start, 0, -1):
            z = noise.normal()
            if i == 1 and not cfg.final_noise:
                z[:] = 0.0
            g.delta = _step_size(sched, i)
            s = g(x, i)
            if sched.kind == VP:
                b = sched.beta(i)
                x = (x + b * s) / np.sqrt(1.0 - b) + np.sqrt(b) * z
            else:
                d = sched.sigma_step(i) ** 2 - sched.sigma_step(i - 1) ** 2
                x = x + d * s + np.sqrt(d) * z
            if not np.all(np.isfinite(x)):
                raise NonFiniteStateError(i, "diffcom_decode")
    else:
        steps = cfg.steps or sched.steps
        h = start / steps
        rate = (lambda t: 0.5 * float(sched.beta_rate(t)) * h) if sched.kind == VP else \
            (lambda t: 0.5 * float(sched.sigma2_rate(t)) * h)

        def guided(xx, tau):
            g.delta = rate(tau)
            return g(xx, tau)

        x = pf_ode(guided, sched, cfg.sampler, steps, SampleBatch(x), seed=seed, t_start=start).points
    return DecodeResult(x, start, np.asarray(g.rows))


# ---- blind decoding ----

def blind_diffcom_decode(y, family, prior_score_x, prior_score_h, sched_x: NoiseSchedule, sched_h: NoiseSchedule,
                         cfg: DecoderConfig, seed: int, n: int = 1) -> DecodeResult:
    """Coupled ancestral sampling of (x, h) guided by one shared residual.

    The x chain uses the same noise streams as ``diffcom_decode`` with the
    same seed; the gain chain draws from its own salts.
    """
    if sched_x.steps != sched_h.steps:
        raise ValueError("x and h schedules must have the same number of steps")
    if cfg.sampler != "reverse_sde" or cfg.start_mode != "full":
        raise ValueError("blind decoding runs the full reverse SDE")
    D, G = family.in_dim, family.gain_dim
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        n = y.shape[0]
    x = sched_x.terminal_std * ChainStreams(seed, n, D, salt=INIT_SALT).normal()
    h = sched_h.terminal_std * ChainStreams(seed, n, G, salt=GAIN_INIT_SALT).normal()
    nx = ChainStreams(seed, n, D)
    nh = ChainStreams(seed, n, G, salt=GAIN_SALT)
    rows = []
    for i in range(sched_x.steps, 0, -1):
        zx, zh = nx.normal(), nh.normal()
        if i == 1 and not cfg.final_noise:
            zx[:] = 0.0
            zh[:] = 0.0
        sx, xh, Jx = _tweedie_parts(prior_score_x, sched_x, x, i)
        sh, hh, Jh = _tweedie_parts(prior_score_h, sched_h, h, i)
        r = y - family.mean_apply(xh, hh)
        gx = np.einsum("nji,nj->ni", Jx, 2.0 * family.vjp_x(xh, hh, r))
        gh = np.einsum("nji,nj->ni", Jh, 2.0 * family.vjp_h(xh, hh, r))
        if cfg.normalize_residual:
            nr = np.linalg.norm(r, axis=1, keepdims=True)
            gx = np.divide(gx, nr, out=np.zeros_like(gx), where=nr > 0)
            gh = np.divide(gh, nr, out=np.zeros_like(gh), where=nr > 0)
        w = 1.0 - (i - 1.0) / sched_x.steps if cfg.anneal else 1.0
        gamma = cfg.gamma
        if cfg.step_cap and gamma > 0:
            dx = np.einsum("nij,nj->ni", Jx, gx)
            dh = np.einsum("nij,nj->ni", Jh, gh)
            # linearized change of the residual along the joint guidance direction
            v = family.mean_apply(dx, hh) + family.mean_apply(xh, dh)
            gamma = _gn_cap(r, v, gamma, _step_size(sched_x, i) * w)
        rows.append((float(i), np.mean(np.linalg.norm(r, axis=1)), 0.0, np.mean(np.linalg.norm(x, axis=1))))
        x = _reverse(sched_x, x, i, sx + w * gamma * gx, zx)
        h = _reverse(sched_h, h, i, sh + w * gamma * gh, zh)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
            raise NonFiniteStateError(i, "blind_diffcom_decode")
    return DecodeResult(x, sched_x.steps, np.asarray(rows), h)


def _reverse(sched, x, i, s, z):
    if sched.kind == VP:
        b = sched.beta(i)
        return (x + b * s) / np.sqrt(1.0 - b) + np.sqrt(b) * z
    d = sched.sigma_step(i) ** 2 - sched.sigma_step(i - 1) ** 2
    return x + d * s + np.sqrt(d) * z
