"""Analytic Gaussian-mixture sources.

Mixtures provide exact log-densities, scores, score Jacobians and samples,
and close under the Gaussian forward kernels of the noise schedules, which
makes them the ground truth for everything downstream.

Key layout for the text form (see ``to_dict``/``from_dict``)::

    weights   = [w_1, ..., w_K]
    means     = [[...D...], ...]            # K rows
    cov_diag  = [[...D...], ...]            # K rows, diagonal covariances
    covariances = [[[...D...], ...], ...]   # K full D x D matrices (instead of cov_diag)
    labels    = [l_1, ..., l_K]             # optional class ids
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

LOG_2PI = np.log(2.0 * np.pi)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    point: np.ndarray
    label: int


class GaussianMixture:
    """Finite mixture of full-covariance Gaussians in D dimensions."""

    def __init__(self, weights, means, covariances, labels=None):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.asarray(means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None] if w.size > 1 or mu.size == 1 else mu[None, :]
        K, D = mu.shape
        if w.shape != (K,):
            raise DimensionError(f"{w.size} weights for {K} components")
        if K < 1 or D < 1:
            raise DimensionError("need K >= 1 and D >= 1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        cov = np.asarray(covariances, dtype=float)
        if cov.shape == (K, D):
            cov = np.stack([np.diag(c) for c in cov])
        elif cov.shape == (K,) and D == 1:
            cov = cov.reshape(K, 1, 1)
        if cov.shape != (K, D, D):
            raise DimensionError(f"covariances shape {cov.shape}, expected {(K, D, D)}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariances must be positive definite") from None
        if np.any(np.diagonal(chol, axis1=1, axis2=2) <= 0):
            raise ValueError("covariances must be positive definite")
        for arr in (w, mu, cov, chol):
            arr.setflags(write=False)
        self.weights, self.means, self.covariances, self.chol = w, mu, cov, chol
        self.precisions = np.linalg.inv(cov)
        self.precisions.setflags(write=False)
        self.logdets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self.diagonal = bool(np.all(cov == np.stack([np.diag(np.diag(c)) for c in cov])))
        self._inv_var = 1.0 / np.diagonal(cov, axis1=1, axis2=2)
        with np.errstate(divide="ignore"):
            self._logw = np.log(w)
        if labels is not None:
            labels = np.asarray(labels, dtype=int)
            if labels.shape != (K,):
                raise DimensionError("one label per component required")
        self.labels = labels

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __repr__(self):
        return f"GaussianMixture(K={self.n_components}, D={self.dim})"

    # ---- evaluation ----

    def _as_batch(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x[None, :] if x.size == self.dim else x[:, None]
        if x.shape[-1] != self.dim:
            raise DimensionError(f"expected points of dimension {self.dim}, got {x.shape[-1]}")
        return x, single and x.shape[0] == 1

    def component_log_pdf(self, x):
        """(n, K) matrix of log N(x; mu_k, Sigma_k)."""
        x, _ = self._as_batch(x)
        if self.diagonal and self.dim == 1:
            maha = (x - self.means[:, 0][None, :]) ** 2 * self._inv_var[:, 0][None, :]
        else:
            diff = x[:, None, :] - self.means[None, :, :]
            if self.diagonal:
                maha = np.einsum("nkd,kd->nk", diff * diff, self._inv_var)
            else:
                maha = np.einsum("nki,kij,nkj->nk", diff, self.precisions, diff)
        return -0.5 * (maha + (self.dim * LOG_2PI + self.logdets)[None, :])

    def log_responsibilities(self, x):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        joint = self.component_log_pdf(x) + logw[None, :]
        return joint - logsumexp(joint, axis=1, keepdims=True)

    def responsibilities(self, x):
        if self.n_components == 1:
            xb, _ = self._as_batch(x)
            return np.ones((xb.shape[0], 1))
        joint = self.component_log_pdf(x) + self._logw[None, :]
        # column loops: axis-1 reductions over a handful of components are slow
        top = joint[:, 0].copy()
        for k in range(1, joint.shape[1]):
            np.maximum(top, joint[:, k], out=top)
        r = np.exp(joint - top[:, None])
        tot = r[:, 0].copy()
        for k in range(1, r.shape[1]):
            tot += r[:, k]
        r /= tot[:, None]
        return r

    def log_density(self, x):
        xb, single = self._as_batch(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        out = logsumexp(self.component_log_pdf(xb) + logw[None, :], axis=1)
        return float(out[0]) if single else out

    def component_scores(self, x):
        """(n, K, D) array of -P_k (x - mu_k)."""
        x, _ = self._as_batch(x)
        diff = x[:, None, :] - self.means[None, :, :]
        if self.diagonal:
            return -diff * self._inv_var[None]
        return -np.einsum("kij,nkj->nki", self.precisions, diff)

    def score(self, x):
        xb, single = self._as_batch(x)
        if self.n_components == 1:
            diff = xb - self.means[0]
            s = -diff * self._inv_var[0] if self.diagonal else -diff @ self.precisions[0]
            return self._restore(s, x, single)
        r = self.responsibilities(xb)
        if self.diagonal:
            # sum_k r_k * (-(x - mu_k) / var_k) without the (n, K, D) einsum
            s = -(xb * (r @ self._inv_var)) + r @ (self.means * self._inv_var)
        else:
            s = np.einsum("nk,nki->ni", r, self.component_scores(xb))
        return self._restore(s, x, single)

    def score_jacobian(self, x):
        """(n, D, D) Hessian of the log-density."""
        xb, _ = self._as_batch(x)
        r = self.responsibilities(xb)
        sk = self.component_scores(xb)
        s = np.einsum("nk,nki->ni", r, sk)
        second = np.einsum("nk,nki,nkj->nij", r, sk, sk)
        return -np.einsum("nk,kij->nij", r, self.precisions) + second - s[:, :, None] * s[:, None, :]

    def _restore(self, out, x, single):
        x = np.asarray(x)
        if single:
            return out[0] if x.ndim == 1 else out.reshape(x.shape)
        if x.ndim == 1:
            return out[:, 0]
        return out

    # ---- moments and transforms ----

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum("k,ki,kj->ij", self.weights, diff, diff)

    def affine(self, scale: float, noise_var: float) -> "GaussianMixture":
        """Law of ``scale * X + sqrt(noise_var) * eps`` for X from this mixture."""
        cov = scale**2 * self.covariances + noise_var * np.eye(self.dim)[None]
        return GaussianMixture(self.weights, scale * self.means, cov, self.labels)

    def sample(self, n: int, seed: int):
        """Draw ``n`` points; returns ``(points (n, D), labels (n,))``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        pts = self.means[comp] + np.einsum("nij,nj->ni", self.chol[comp], z)
        return pts, comp

    def labeled_samples(self, n: int, seed: int) -> list[LabeledSample]:
        pts, comp = self.sample(n, seed)
        lab = comp if self.labels is None else self.labels[comp]
        return [LabeledSample(p, int(l)) for p, l in zip(pts, lab)]

    # ---- serialization ----

    def to_dict(self) -> dict:
        d = {"weights": self.weights.tolist(), "means": self.means.tolist()}
        if self.diagonal:
            d["cov_diag"] = np.diagonal(self.covariances, axis1=1, axis2=2).tolist()
        else:
            d["covariances"] = self.covariances.tolist()
        if self.labels is not None:
            d["labels"] = self.labels.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        unknown = set(d) - {"weights", "means", "cov_diag", "covariances", "labels"}
        if unknown:
            raise KeyError(f"unknown mixture keys: {sorted(unknown)}")
        if ("cov_diag" in d) == ("covariances" in d):
            raise KeyError("exactly one of cov_diag / covariances is required")
        means = np.asarray(d["means"], dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        cov = d["cov_diag"] if "cov_diag" in d else d["covariances"]
        cov = np.asarray(cov, dtype=float)
        if "cov_diag" in d and cov.ndim == 1:
            cov = cov[:, None]
        return cls(d["weights"], means, cov, d.get("labels"))


def standard_normal(dim: int = 1) -> GaussianMixture:
    return GaussianMixture([1.0], np.zeros((1, dim)), np.eye(dim)[None])


def gaussian(mean, cov) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(mean.size)
    elif cov.ndim == 1:
        cov = np.diag(cov)
    return GaussianMixture([1.0], mean[None, :], cov[None])


def symmetric_pair(m: float, var: float = 1.0, dim: int = 1) -> GaussianMixture:
    """Equal-weight mixture at +-m (along the first axis) with labels (0, 1)."""
    mu = np.zeros((2, dim))
    mu[0, 0], mu[1, 0] = -m, m
    return GaussianMixture([0.5, 0.5], mu, np.stack([var * np.eye(dim)] * 2), labels=[0, 1])


def log_density(gmm: GaussianMixture, x):
    return gmm.log_density(x)


def score(gmm: GaussianMixture, x):
    return gmm.score(x)


def sample(gmm: GaussianMixture, n: int, seed: int):
    return gmm.sample(n, seed)


def perturbed_marginal(gmm: GaussianMixture, sched: NoiseSchedule, i) -> GaussianMixture:
    """Closed-form noisy marginal at step ``i`` (integer or fractional)."""
    if sched.kind not in ("vp", "ve"):
        raise ValueError(f"unsupported schedule kind {sched.kind!r}")
    if not 0 <= float(i) <= sched.steps:
        raise ValueError(f"step {i} outside 0..{sched.steps}")
    if float(i) == 0.0:
        return gmm
    a = float(sched.alpha(i))
    s = float(sched.sigma(i))
    return gmm.affine(a, s * s)
