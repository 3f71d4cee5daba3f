"""Conditioning: analytic classifier guidance, classifier-free interpolation,
measurement guidance through the Tweedie surrogate (DPS), its blind
two-prior variant, and a semantic feature regularizer.

Sign convention: the measurement term ascends the approximate log-posterior,
so the guided score is ``s - gamma * grad ||y - A(x_hat)||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import GaussianMixture, perturbed_marginal
from .engine import tweedie
from .schedule import NoiseSchedule
from .score_net import eps_from_score, score_from_eps
from .scores import score_jacobian

__all__ = [
    "GuidanceConfig", "gmm_classifier", "class_conditional", "cg_score", "cfg_combine",
    "eps_from_score", "score_from_eps", "measurement_grad", "dps_score", "DPSScore",
    "GainFamily", "blind_dps_step", "blind_log_posterior", "semantic_reg_grad",
]


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 0.0
    lam: float = 0.0
    normalize_residual: bool = False

    def __post_init__(self):
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v!r}")

    @classmethod
    def conjugate(cls, sigma_n: float, **kw):
        """gamma = 1 / (2 sigma_n^2), the likelihood weight of a Gaussian channel."""
        return cls(gamma=1.0 / (2.0 * sigma_n**2), **kw)


# ---- classifier guidance ----

def _classes(gmm):
    if gmm.labels is None:
        raise ValueError("classifier guidance needs a labeled mixture")
    return np.unique(gmm.labels)


def gmm_classifier(gmm: GaussianMixture, x_t, i, sched: NoiseSchedule):
    """Exact p(y | x_t) over classes and the gradients of log p(y | x_t).

    Returns ``(probs (n, C), grads (n, C, D))`` with classes in sorted label
    order.
    """
    classes = _classes(gmm)
    m = perturbed_marginal(gmm, sched, i)
    x, _ = m._as_batch(x_t)
    r = m.responsibilities(x)
    sk = m.component_scores(x)
    s = np.einsum("nk,nki->ni", r, sk)
    probs = np.empty((x.shape[0], classes.size))
    grads = np.empty((x.shape[0], classes.size, x.shape[1]))
    for c, lab in enumerate(classes):
        sel = gmm.labels == lab
        pc = r[:, sel].sum(axis=1)
        probs[:, c] = pc
        with np.errstate(invalid="ignore", divide="ignore"):
            grads[:, c] = np.einsum("nk,nki->ni", r[:, sel], sk[:, sel]) / pc[:, None] - s
    return probs, grads


def class_conditional(gmm: GaussianMixture, label) -> GaussianMixture:
    """Sub-mixture of the components carrying ``label``."""
    _classes(gmm)
    sel = gmm.labels == label
    if not np.any(sel):
        raise ValueError(f"no component has label {label!r}")
    w = gmm.weights[sel] / gmm.weights[sel].sum()
    return GaussianMixture(w, gmm.means[sel], gmm.covariances[sel], gmm.labels[sel])


def cg_score(s_uncond, grad_logp_y, gamma):
    return np.asarray(s_uncond, dtype=float) + gamma * np.asarray(grad_logp_y, dtype=float)


def cfg_combine(s_uncond, s_cond, gamma):
    """(1 - gamma) s_u + gamma s_c, as written (no extrapolation variant).

    Evaluated as s_u + gamma (s_c - s_u) so that equal inputs come back
    unchanged; the endpoints return their input exactly.
    """
    su = np.asarray(s_uncond, dtype=float)
    sc = np.asarray(s_cond, dtype=float)
    if gamma == 0:
        return su.copy()
    if gamma == 1:
        return sc.copy()
    return su + gamma * (sc - su)


# ---- measurement guidance ----

def _tweedie_vjp(scorefn, sched, x, i, u):
    """(d x_hat / d x_t)^T u row-wise."""
    a = float(sched.alpha(i))
    s2 = float(sched.sigma(i)) ** 2
    J = score_jacobian(scorefn, x, i)
    return (u + s2 * np.einsum("nji,nj->ni", J, u)) / a


def measurement_grad(scorefn, op, y, x_t, i, sched, normalize=False):
    """grad_x ( -||y - A(x_hat(x_t))||^2 ) with the residual and x_hat.

    Returns ``(grad, residual, x_hat)``.
    """
    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    xh = tweedie(x, i, scorefn, sched)
    r = np.asarray(y, dtype=float) - op.mean_apply(xh)
    if r.shape[0] != x.shape[0]:
        r = np.broadcast_to(r, (x.shape[0], r.shape[-1]))
    u = 2.0 * op.vjp(xh, r)
    g = _tweedie_vjp(scorefn, sched, x, i, u)
    if normalize:
        nr = np.linalg.norm(r, axis=1, keepdims=True)
        g = np.divide(g, nr, out=np.zeros_like(g), where=nr > 0)
    return g, r, xh


def dps_score(scorefn, op, y, x_t, i, cfg: GuidanceConfig, sched: NoiseSchedule):
    """s(x_t) - gamma * grad ||y - A(x_hat_{0|t})||^2."""
    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    s = np.asarray(scorefn(x, i)).reshape(x.shape)
    if cfg.gamma == 0:
        return s
    g, _, _ = measurement_grad(scorefn, op, y, x, i, sched, cfg.normalize_residual)
    return s + cfg.gamma * g


class DPSScore:
    """``dps_score`` wrapped as an engine score function of (x, tau)."""

    def __init__(self, scorefn, op, y, cfg: GuidanceConfig, sched: NoiseSchedule):
        self.scorefn, self.op, self.y, self.cfg, self.sched = scorefn, op, y, cfg, sched

    def __call__(self, x, tau):
        return dps_score(self.scorefn, self.op, self.y, x, tau, self.cfg, self.sched)


# ---- blind (joint source / gain) guidance ----

class GainFamily:
    """A_h(x) = h * (c M x): scalar gain (one h) or diagonal gain (one per symbol)."""

    def __init__(self, encoder, mode: str = "scalar", sigma_n: float = 0.0, power_scale: float = 1.0):
        if mode not in ("scalar", "diagonal"):
            raise ValueError(f"unsupported operator family {mode!r}")
        if not getattr(encoder, "linear", False):
            raise ValueError("gain families need a linear encoder")
        self.encoder, self.mode, self.sigma_n, self.power_scale = encoder, mode, float(sigma_n), power_scale

    @property
    def in_dim(self):
        return self.encoder.in_dim

    @property
    def out_dim(self):
        return self.encoder.out_dim

    @property
    def gain_dim(self):
        return 1 if self.mode == "scalar" else self.out_dim

    def mean_apply(self, x, h):
        z = self.power_scale * self.encoder(x)
        return np.atleast_2d(h) * z

    def vjp_x(self, x, h, u):
        return self.encoder.vjp(x, self.power_scale * np.atleast_2d(h) * u)

    def vjp_h(self, x, h, u):
        zu = self.power_scale * self.encoder(x) * u
        return zu.sum(axis=1, keepdims=True) if self.mode == "scalar" else zu

    def at(self, h):
        """The known-gain ForwardOperator for a fixed gain vector."""
        from .channel import ChannelState, ForwardOperator, LinearEncoder

        h = np.atleast_1d(np.asarray(h, dtype=float))
        if self.mode == "scalar":
            return ForwardOperator(self.encoder, "fading", ChannelState(h[:1]), self.sigma_n, self.power_scale)
        enc = LinearEncoder(h[:, None] * self.encoder.matrix,
                            None if self.encoder.bias is None else h * self.encoder.bias)
        return ForwardOperator(enc, "awgn", sigma_n=self.sigma_n, power_scale=self.power_scale)


def blind_dps_step(scorefn_x, scorefn_h, family: GainFamily, y, x_t, h_t, i, cfg: GuidanceConfig,
                   sched_x: NoiseSchedule, sched_h: NoiseSchedule):
    """Guided scores for x and h sharing one residual y - A_{h_hat}(x_hat)."""
    if not isinstance(family, GainFamily):
        raise TypeError("unsupported operator family")
    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    h = np.atleast_2d(np.asarray(h_t, dtype=float))
    if h.shape != (x.shape[0], family.gain_dim):
        h = h.reshape(x.shape[0], family.gain_dim)
    sx = np.asarray(scorefn_x(x, i)).reshape(x.shape)
    sh = np.asarray(scorefn_h(h, i)).reshape(h.shape)
    if cfg.gamma == 0:
        return sx, sh
    xh = tweedie(x, i, scorefn_x, sched_x)
    hh = tweedie(h, i, scorefn_h, sched_h)
    r = np.asarray(y, dtype=float) - family.mean_apply(xh, hh)
    gx = _tweedie_vjp(scorefn_x, sched_x, x, i, 2.0 * family.vjp_x(xh, hh, r))
    gh = _tweedie_vjp(scorefn_h, sched_h, h, i, 2.0 * family.vjp_h(xh, hh, r))
    if cfg.normalize_residual:
        nr = np.linalg.norm(r, axis=1, keepdims=True)
        gx = np.divide(gx, nr, out=np.zeros_like(gx), where=nr > 0)
        gh = np.divide(gh, nr, out=np.zeros_like(gh), where=nr > 0)
    return sx + cfg.gamma * gx, sh + cfg.gamma * gh


def blind_log_posterior(prior_x: GaussianMixture, prior_h: GaussianMixture, family: GainFamily, y):
    """Unnormalized log p(x, h | y) for a scalar gain, vectorized over (x, h) rows.

    The callable takes an ``(n, D + 1)`` array whose last column is h.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    s2 = family.sigma_n**2
    if s2 <= 0:
        raise ValueError("the analytic posterior needs sigma_n > 0")

    def logpost(pts):
        pts = np.atleast_2d(pts)
        x, h = pts[:, :-1], pts[:, -1:]
        lik = -0.5 * np.sum((y - family.mean_apply(x, h)) ** 2, axis=1) / s2
        return prior_x.log_density(x) + prior_h.log_density(h) + lik

    return logpost


# ---- semantic regularizer ----

def semantic_reg_grad(extractor, x, x_ref):
    """grad_x ||E_sem(x) - E_sem(x_ref)||^2 for a linear feature map."""
    M = np.array(getattr(extractor, "matrix", extractor), dtype=float, ndmin=2)
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    if x.shape[-1] != M.shape[1] or x_ref.shape[-1] != M.shape[1]:
        raise ValueError(f"extractor expects length-{M.shape[1]} vectors")
    return 2.0 * ((x - x_ref) @ M.T) @ M
