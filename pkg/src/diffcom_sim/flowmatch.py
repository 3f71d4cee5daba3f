"""Flow matching on straight-line paths and the consistency-model output head.

Time runs from t = 0 (prior draw x0) to t = 1 (data draw x1), the opposite of
the diffusion step coordinate where 0 is clean data. ``fm_transport`` takes a
``direction`` flag to integrate either way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import GaussianMixture, standard_normal
from .engine import NonFiniteStateError
from .scores import as_batch
from .score_net import ScoreNetwork, TrainConfig, TrainingDiverged

PRIOR_TO_DATA = "prior_to_data"
DATA_TO_PRIOR = "data_to_prior"


def fm_pair(x0, x1, t):
    """Interpolant x_t = (1 - t) x0 + t x1 and target velocity x1 - x0."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * x0 + t * x1, x1 - x0


def _fm_batch(data: GaussianMixture, prior: GaussianMixture, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    x1, _ = data.sample(batch, int(rng.integers(2**63)))
    x0, _ = prior.sample(batch, int(rng.integers(2**63)))
    t = rng.uniform(0.0, 1.0, batch)
    xt, v = fm_pair(x0, x1, t)
    return xt, t, v


def _eval(vnet, x, t):
    if isinstance(vnet, ScoreNetwork):
        return vnet(x, t)
    return np.asarray(vnet(x, t), dtype=float).reshape(x.shape)


def fm_loss(vnet, data: GaussianMixture, batch: int, seed: int, prior: GaussianMixture | None = None) -> float:
    """Monte Carlo E||(x1 - x0) - v(x_t, t)||^2 over independent (t, x0, x1)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    prior = standard_normal(data.dim) if prior is None else prior
    xt, t, v = _fm_batch(data, prior, batch, seed)
    return float(np.mean(np.sum((v - _eval(vnet, xt, t)) ** 2, axis=1)))


def fm_loss_grad(vnet: ScoreNetwork, data, batch: int, seed: int, prior=None):
    prior = standard_normal(data.dim) if prior is None else prior
    xt, t, v = _fm_batch(data, prior, batch, seed)
    out, cache = vnet.forward(xt, t, keep=True)
    r = out - v
    g = vnet.backward(cache, 2.0 * r / xt.shape[0])
    return float(np.mean(np.sum(r * r, axis=1))), np.concatenate([p.ravel() for p in g])


def fm_train(vnet: ScoreNetwork, data: GaussianMixture, cfg: TrainConfig, prior=None, trace=None) -> ScoreNetwork:
    """Gradient descent on the flow-matching loss (same loop as DSM training)."""
    rng = np.random.default_rng(cfg.seed)
    theta = vnet.flat()
    vel = np.zeros_like(theta)
    cur = vnet
    for k in range(cfg.steps):
        loss, g = fm_loss_grad(cur, data, cfg.batch_size, int(rng.integers(2**63)), prior)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise TrainingDiverged(k, loss)
        vel = cfg.momentum * vel - cfg.learning_rate * g
        theta = theta + vel
        cur = cur.with_flat(theta)
        if trace is not None:
            trace.append(loss)
    return cur


@dataclass(frozen=True)
class GaussianVelocity:
    """Exact marginal velocity between independent N(m0, v0) and N(m1, v1) (per coordinate)."""

    m0: float = 0.0
    v0: float = 1.0
    m1: float = 0.0
    v1: float = 1.0

    def gain(self, t):
        t = np.asarray(t, dtype=float)
        return (t * self.v1 - (1.0 - t) * self.v0) / ((1.0 - t) ** 2 * self.v0 + t**2 * self.v1)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if t.ndim == 1 and x.ndim == 2:
            t = t[:, None]
        mt = (1.0 - t) * self.m0 + t * self.m1
        return (self.m1 - self.m0) + self.gain(t) * (x - mt)


def fm_transport(vnet, x0, steps: int, method: str = "rk4", direction: str = PRIOR_TO_DATA,
                 keep_trajectory: bool = False):
    """Integrate dx/dt = v(x, t) on a uniform grid, 0 -> 1 or 1 -> 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    if direction not in (PRIOR_TO_DATA, DATA_TO_PRIOR):
        raise ValueError(f"unknown direction {direction!r}")
    x = as_batch(x0, getattr(vnet, "dim", None)).copy()
    grid = np.linspace(0.0, 1.0, steps + 1)
    if direction == DATA_TO_PRIOR:
        grid = grid[::-1]
    f = lambda y, t: _eval(vnet, y, np.full(y.shape[0], t))
    traj = [x.copy()] if keep_trajectory else None
    for k in range(steps):
        ta, tb = grid[k], grid[k + 1]
        h = tb - ta
        if method == "rk4":
            k1 = f(x, ta)
            k2 = f(x + 0.5 * h * k1, ta + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, ta + 0.5 * h)
            k4 = f(x + h * k3, tb)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            x = x + h * f(x, ta)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(k, "fm_transport")
        if keep_trajectory:
            traj.append(x.copy())
    return (x, np.stack(traj)) if keep_trajectory else x


# ---- consistency parameterization ----

class ConsistencyHead:
    """c(x, t) = c_skip(t) x + c_out(t) F(x, t), identity at t = xi."""

    def __init__(self, inner, xi: float = 1e-3, sigma_d: float = 0.5):
        if not xi > 0:
            raise ValueError("xi must be positive")
        self.inner, self.xi, self.sigma_d = inner, float(xi), float(sigma_d)
        if self.c_skip(self.xi) != 1.0 or self.c_out(self.xi) != 0.0:
            raise AssertionError("boundary conditions violated")

    def c_skip(self, t):
        d = np.asarray(t, dtype=float) - self.xi
        return self.sigma_d**2 / (d * d + self.sigma_d**2)

    def c_out(self, t):
        d = np.asarray(t, dtype=float) - self.xi
        return self.sigma_d * d / np.sqrt(d * d + self.sigma_d**2)


def consistency_apply(head: ConsistencyHead, x, t):
    t = float(t)
    if t < head.xi:
        raise ValueError(f"t = {t} is below the boundary time {head.xi}")
    x = np.asarray(x, dtype=float)
    cs, co = float(head.c_skip(t)), float(head.c_out(t))
    if co == 0.0:
        return cs * x
    return cs * x + co * _eval(head.inner, np.atleast_2d(x), t).reshape(x.shape)


class GaussianConsistencyInner:
    """Inner map F making the head equal the exact PF-ODE solution map of a
    Gaussian source N(mu, s0^2) under dx/dt = -t * score (noise std = t)."""

    def __init__(self, head_xi: float, mu: float, s0: float, sigma_d: float = 0.5):
        self.probe = ConsistencyHead(lambda x, t: np.zeros_like(x), head_xi, sigma_d)
        self.mu, self.s0 = mu, s0

    def target(self, x, t):
        xi = self.probe.xi
        return self.mu + (x - self.mu) * np.sqrt(self.s0**2 + xi**2) / np.sqrt(self.s0**2 + t**2)

    def __call__(self, x, t):
        t = float(np.atleast_1d(t)[0])
        co = float(self.probe.c_out(t))
        if co == 0.0:
            return np.zeros_like(x)
        return (self.target(x, t) - float(self.probe.c_skip(t)) * x) / co


def edm_pf_ode(scorefn, x, t_grid):
    """RK4 on dx/dt = -t * score(x, t) along ``t_grid``; returns the trajectory."""
    x = np.array(x, dtype=float, ndmin=2)
    f = lambda y, t: -t * scorefn(y, t)
    traj = [x.copy()]
    for ta, tb in zip(t_grid[:-1], t_grid[1:]):
        h = tb - ta
        k1 = f(x, ta)
        k2 = f(x + 0.5 * h * k1, ta + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, ta + 0.5 * h)
        k4 = f(x + h * k3, tb)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        traj.append(x.copy())
    return np.stack(traj)
