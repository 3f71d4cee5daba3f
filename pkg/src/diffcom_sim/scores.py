"""Score-function callables.

A score function is any callable ``scorefn(x, tau) -> (n, D)`` taking a
batch of points and a step coordinate. Objects may also expose
``jacobian(x, tau) -> (n, D, D)``; otherwise ``score_jacobian`` falls back to
central differences.
"""
from __future__ import annotations

import numpy as np

from .distributions import GaussianMixture, perturbed_marginal
from .schedule import NoiseSchedule


class AnalyticScore:
    """Exact score of the noised marginal of a Gaussian mixture."""

    def __init__(self, gmm: GaussianMixture, sched: NoiseSchedule):
        self.gmm = gmm
        self.sched = sched
        self._cache = {}

    def marginal(self, tau) -> GaussianMixture:
        key = float(tau)
        m = self._cache.get(key)
        if m is None:
            m = perturbed_marginal(self.gmm, self.sched, key)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = m
        return m

    def __call__(self, x, tau):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.marginal(tau).score(x).reshape(x.shape)

    def jacobian(self, x, tau):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.marginal(tau).score_jacobian(x)

    def log_density(self, x, tau):
        return self.marginal(tau).log_density(np.atleast_2d(x))


def as_batch(x, dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        if dim is not None and x.size == dim:
            return x[None, :]
        return x[:, None]
    return x


def score_jacobian(scorefn, x, tau, h: float = 1e-5):
    """Jacobian of ``scorefn`` in x, analytic when available."""
    jac = getattr(scorefn, "jacobian", None)
    if jac is not None:
        return jac(x, tau)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, D = x.shape
    out = np.empty((n, D, D))
    for j in range(D):
        e = np.zeros(D)
        e[j] = h
        out[:, :, j] = (scorefn(x + e, tau) - scorefn(x - e, tau)) / (2 * h)
    return out
