"""Forward perturbation, Langevin dynamics, reverse-SDE ancestral sampling,
probability-flow ODE solvers and the Tweedie denoiser.

Per-chain random streams
------------------------
Chains are grouped in fixed blocks of ``BLOCK`` consecutive indices. Block
``b`` owns the generator ``PCG64(SeedSequence([seed, salt, b]))`` and every
draw takes a full ``(BLOCK, D)`` array from it, of which the rows belonging
to live chains are kept. The noise seen by chain ``c`` therefore depends only
on ``(seed, salt, c)``, never on the batch size or on how blocks are spread
over workers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule, VE, VP
from .scores import as_batch

BLOCK = 1024
METHODS = ("euler", "rk4", "predictor_corrector")


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step, where="sampler"):
        super().__init__(f"{where}: non-finite state at step {step}")
        self.step = step


class ChainStreams:
    def __init__(self, seed: int, n: int, dim: int, salt: int = 0):
        self.n, self.dim = int(n), int(dim)
        nblocks = -(-self.n // BLOCK)
        self._gens = [np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(salt), b])))
                      for b in range(nblocks)]

    def normal(self) -> np.ndarray:
        out = np.empty((self.n, self.dim))
        for b, g in enumerate(self._gens):
            lo = b * BLOCK
            hi = min(lo + BLOCK, self.n)
            out[lo:hi] = g.standard_normal((BLOCK, self.dim))[: hi - lo]
        return out


class ZeroNoise:
    """Noise source that always returns zeros (deterministic limits)."""

    def __init__(self, n, dim):
        self.n, self.dim = n, dim

    def normal(self):
        return np.zeros((self.n, self.dim))


class ConstantNoise(ZeroNoise):
    def __init__(self, n, dim, value=1.0):
        super().__init__(n, dim)
        self.value = value

    def normal(self):
        return np.full((self.n, self.dim), float(self.value))


@dataclass
class SampleBatch:
    points: np.ndarray
    step_index: float = 0
    seed: int | None = None
    chains: np.ndarray | None = None
    trajectory: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = as_batch(self.points)
        if self.chains is None:
            self.chains = np.arange(self.points.shape[0])
        if not np.all(np.isfinite(self.points)):
            raise NonFiniteStateError(self.step_index, "SampleBatch")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def _check(x, step, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(step, where)


def forward_sample(x0, sched: NoiseSchedule, i, seed=None, eps=None):
    """One draw of x_i = alpha_i x0 + sigma_i eps from the closed-form kernel."""
    x0 = np.asarray(x0, dtype=float)
    if float(i) < 1:
        raise ValueError("forward_sample needs i >= 1")
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(x0.shape)
    return sched.alpha(i) * x0 + sched.sigma(i) * np.asarray(eps, dtype=float)


def langevin(scorefn, init, zeta: float, steps: int, seed: int = 0, streams=None, trace_every: int | None = None):
    """Unadjusted Langevin: x <- x + zeta * s(x) + sqrt(2 zeta) * eps.

    ``scorefn`` takes only the batch of points. With ``trace_every`` set,
    returns ``(batch, trace)`` where ``trace`` stacks every k-th state.
    """
    if not zeta > 0:
        raise ValueError("Langevin step size must be positive")
    batch = init if isinstance(init, SampleBatch) else SampleBatch(init)
    x = batch.points.copy()
    noise = streams or ChainStreams(seed, batch.n, batch.dim)
    root = np.sqrt(2.0 * zeta)
    trace = []
    for k in range(steps):
        x = x + zeta * scorefn(x) + root * noise.normal()
        _check(x, k, "langevin")
        if trace_every and (k + 1) % trace_every == 0:
            trace.append(x.copy())
    out = SampleBatch(x, batch.step_index, seed, batch.chains)
    if trace_every:
        return out, np.stack(trace) if trace else np.empty((0,) + x.shape)
    return out


def reverse_step(scorefn, sched: NoiseSchedule, x, i: int, z):
    """One reverse recursion from step i to i - 1 with injected noise ``z``."""
    s = scorefn(x, i)
    if sched.kind == VP:
        b = sched.beta(i)
        return (x + b * s) / np.sqrt(1.0 - b) + np.sqrt(b) * z
    d = sched.sigma_step(i) ** 2 - sched.sigma_step(i - 1) ** 2
    return x + d * s + np.sqrt(d) * z


def reverse_sde(scorefn, sched: NoiseSchedule, n: int, seed: int, dim: int = 1, *,
                start_step: int | None = None, x_init=None, final_noise: bool = True,
                streams=None, keep_trajectory: bool = False, callback=None) -> SampleBatch:
    """Ancestral sampling down the discrete reverse recursion to i = 0.

    Starts from the terminal prior (VP: N(0, I), VE: N(0, sigma_N^2 I)) at
    step N unless ``x_init``/``start_step`` are given. ``callback(i, x)`` is
    called before each step.
    """
    start = sched.steps if start_step is None else int(start_step)
    if not 1 <= start <= sched.steps:
        raise ValueError(f"start step {start} outside 1..{sched.steps}")
    if x_init is None:
        init_rng = ChainStreams(seed, n, dim, salt=1_000_003)
        x = sched.terminal_std * init_rng.normal()
    else:
        x = as_batch(x_init, dim).copy()
        n, dim = x.shape
    noise = streams or ChainStreams(seed, n, dim)
    traj = [x.copy()] if keep_trajectory else None
    for i in range(start, 0, -1):
        if callback is not None:
            callback(i, x)
        z = noise.normal()
        if i == 1 and not final_noise:
            z = np.zeros_like(z)
        x = reverse_step(scorefn, sched, x, i, z)
        _check(x, i, "reverse_sde")
        if keep_trajectory:
            traj.append(x.copy())
    out = SampleBatch(x, 0, seed)
    if keep_trajectory:
        out.trajectory = np.stack(traj)
    return out


def pf_drift(scorefn, sched: NoiseSchedule, x, tau):
    """d x / d tau of the probability-flow ODE."""
    s = scorefn(x, tau)
    if sched.kind == VP:
        return -0.5 * float(sched.beta_rate(tau)) * (x + s)
    return -0.5 * float(sched.sigma2_rate(tau)) * s


def pf_ode(scorefn, sched: NoiseSchedule, method: str, steps: int, x_T, *, seed: int = 0,
           t_start: float | None = None, t_end: float = 0.0, snr_ratio: float = 0.1,
           keep_trajectory: bool = False) -> SampleBatch:
    """Integrate the probability-flow ODE from ``t_start`` (default N) down to ``t_end``.

    Uses a uniform grid in the step coordinate. ``predictor_corrector`` takes
    an Euler predictor step followed by one Langevin corrector step at the new
    level with step size ``snr_ratio * sigma(tau)^2``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    batch = x_T if isinstance(x_T, SampleBatch) else SampleBatch(x_T)
    x = batch.points.copy()
    t0 = float(sched.steps if t_start is None else t_start)
    grid = np.linspace(t0, float(t_end), steps + 1)
    noise = ChainStreams(seed, batch.n, batch.dim, salt=7) if method == "predictor_corrector" else None
    traj = [x.copy()] if keep_trajectory else None
    f = lambda y, t: pf_drift(scorefn, sched, y, t)
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
            if method == "predictor_corrector" and tb > 0:
                zeta = snr_ratio * float(sched.sigma(tb)) ** 2
                x = x + zeta * scorefn(x, tb) + np.sqrt(2 * zeta) * noise.normal()
        _check(x, tb, f"pf_ode[{method}]")
        if keep_trajectory:
            traj.append(x.copy())
    out = SampleBatch(x, t_end, seed, batch.chains)
    if keep_trajectory:
        out.trajectory = np.stack(traj)
    return out


def tweedie(x_t, i, scorefn, sched: NoiseSchedule):
    """Posterior mean E[x_0 | x_t] = (x_t + sigma^2 s(x_t)) / alpha."""
    if sched.kind not in (VP, VE):
        raise ValueError(f"unsupported schedule kind {sched.kind!r}")
    if float(i) < 0:
        raise ValueError("step must be >= 0")
    x = np.asarray(x_t, dtype=float)
    a = float(sched.alpha(i))
    s2 = float(sched.sigma(i)) ** 2
    return (x + s2 * np.asarray(scorefn(x, i)).reshape(x.shape)) / a


def tweedie_jacobian(x_t, i, scorefn, sched: NoiseSchedule):
    """d x_hat / d x_t as an (n, D, D) array."""
    from .scores import score_jacobian

    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    a = float(sched.alpha(i))
    s2 = float(sched.sigma(i)) ** 2
    J = score_jacobian(scorefn, x, i)
    return (np.eye(x.shape[1])[None] + s2 * J) / a


def write_trajectory_csv(trajectory, path, step_labels=None):
    """Dump a (steps, n, D) trajectory as rows (chain, step, coordinate, value)."""
    traj = np.asarray(trajectory)
    steps = range(traj.shape[0]) if step_labels is None else step_labels
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "step", "coordinate", "value"])
        for k, step in enumerate(steps):
            for c in range(traj.shape[1]):
                for d in range(traj.shape[2]):
                    w.writerow([c, step, d, format(float(traj[k, c, d]), ".17g")])
