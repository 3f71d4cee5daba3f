"""Discrete VE/VP noise schedules with smooth continuous-time extensions.

Step coordinates ``tau`` are floats in ``[0, N]``. Integer values index the
discrete recursion (``tau = 0`` is the clean level); fractional values are
used by the ODE solvers. Every level is described by a pair ``(alpha, sigma)``
such that the forward marginal is ``x_tau = alpha * x_0 + sigma * eps``:

    VP:  alpha = sqrt(abar),  sigma = sqrt(1 - abar)
    VE:  alpha = 1,           sigma = sigma_tau

For the linear VP schedule the continuous ``log abar`` is the exact
analytic continuation of ``sum_s log(1 - beta_s)`` through the log-gamma
function, so it agrees with the cumulative product at every integer step and
is infinitely differentiable in between.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

VP = "vp"
VE = "ve"
KINDS = (VP, VE)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    steps: int
    betas: np.ndarray | None = None
    sigmas: np.ndarray | None = None
    # linear-beta (VP) or geometric-sigma (VE) endpoints
    start: float = 0.0
    end: float = 0.0
    _log_abar: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unsupported schedule kind {self.kind!r}")
        if self.steps < 1:
            raise ScheduleError("schedule needs at least one step")
        if self.kind == VP:
            b = np.asarray(self.betas, dtype=float)
            if b.shape != (self.steps,):
                raise ScheduleError("betas must have length N")
            if not (np.all(b > 0) and np.all(b < 1)):
                raise ScheduleError("betas must lie in (0, 1)")
            if np.any(np.diff(b) < 0):
                raise ScheduleError("betas must be nondecreasing")
            b.setflags(write=False)
            object.__setattr__(self, "betas", b)
            table = np.concatenate([[0.0], np.cumsum(np.log1p(-b))])
            table.setflags(write=False)
            object.__setattr__(self, "_log_abar", table)
        else:
            s = np.asarray(self.sigmas, dtype=float)
            if s.shape != (self.steps,):
                raise ScheduleError("sigmas must have length N")
            if not (s[0] > 0 and np.all(np.diff(s) > 0)):
                raise ScheduleError("sigmas must be positive and strictly increasing")
            s.setflags(write=False)
            object.__setattr__(self, "sigmas", s)

    # ---- discrete arrays (index i = 1..N stored at position i-1) ----

    @property
    def alpha_bars(self) -> np.ndarray:
        if self.kind != VP:
            raise ScheduleError("alpha_bar is defined for VP schedules only")
        return np.cumprod(1.0 - self.betas)

    def beta(self, i: int) -> float:
        """Discrete beta_i for i in 1..N."""
        self._check_index(i)
        if self.kind != VP:
            raise ScheduleError("beta is defined for VP schedules only")
        return float(self.betas[i - 1])

    def sigma_step(self, i: int) -> float:
        """Discrete VE sigma_i, with sigma_0 = 0."""
        if self.kind != VE:
            raise ScheduleError("sigma_i is defined for VE schedules only")
        if i == 0:
            return 0.0
        self._check_index(i)
        return float(self.sigmas[i - 1])

    def _check_index(self, i):
        if not 1 <= i <= self.steps:
            raise ScheduleError(f"step index {i} outside 1..{self.steps}")

    # ---- continuous level functions of tau in [0, N] ----

    def log_alpha_bar(self, tau):
        if self.kind != VP:
            raise ScheduleError("alpha_bar is defined for VP schedules only")
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, self.steps)
        k = np.minimum(np.floor(tau).astype(int), self.steps - 1)
        frac = tau - k
        exact = (frac == 0) | (frac == 1)
        base = self._log_abar[k]
        a, b = self._linear_coeffs()
        if b == 0.0:
            partial = frac * np.log1p(-a)
        else:
            c = (1.0 - a) / b + 1.0
            # log prod_{s=k+1}^{k+frac} (1 - beta_s) continued through log-gamma
            partial = frac * np.log(b) + gammaln(c - k) - gammaln(c - k - frac)
        return np.where(exact, self._log_abar[np.rint(tau).astype(int)], base + partial)

    def alpha_bar(self, tau):
        return np.exp(self.log_alpha_bar(tau))

    def beta_rate(self, tau):
        """-d log(abar)/d tau, the continuous VP diffusion rate."""
        if self.kind != VP:
            raise ScheduleError("beta_rate is defined for VP schedules only")
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, self.steps)
        a, b = self._linear_coeffs()
        if b == 0.0:
            return np.full_like(tau, -np.log1p(-a))
        c = (1.0 - a) / b + 1.0
        return -np.log(b) - digamma(c - tau)

    def sigma_ve(self, tau):
        if self.kind != VE:
            raise ScheduleError("sigma_ve is defined for VE schedules only")
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, self.steps)
        smin = self.sigmas[0]
        if self.steps == 1:
            hi = np.full_like(tau, smin)
        else:
            ratio = np.log(self.sigmas[-1] / smin) / (self.steps - 1)
            hi = smin * np.exp(ratio * (tau - 1.0))
            whole = (tau == np.round(tau)) & (tau >= 1)
            if np.any(whole):
                idx = np.round(tau).astype(int) - 1
                hi = np.where(whole, self.sigmas[np.clip(idx, 0, self.steps - 1)], hi)
        lo = smin * np.sqrt(np.maximum(tau, 0.0))
        return np.where(tau >= 1.0, hi, lo)

    def sigma2_rate(self, tau):
        """d sigma^2 / d tau for VE schedules."""
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, self.steps)
        smin = self.sigmas[0]
        if self.steps == 1:
            hi = np.zeros_like(tau)
        else:
            ratio = np.log(self.sigmas[-1] / smin) / (self.steps - 1)
            hi = 2.0 * ratio * self.sigma_ve(tau) ** 2
        return np.where(tau >= 1.0, hi, smin**2)

    def alpha(self, tau):
        if self.kind == VP:
            return np.sqrt(self.alpha_bar(tau))
        return np.ones_like(np.asarray(tau, dtype=float))

    def sigma(self, tau):
        if self.kind == VP:
            return np.sqrt(-np.expm1(self.log_alpha_bar(tau)))
        return self.sigma_ve(tau)

    def _linear_coeffs(self):
        b0 = float(self.betas[0])
        slope = 0.0 if self.steps == 1 else (float(self.betas[-1]) - b0) / (self.steps - 1)
        return b0, slope

    # ---- time coordinate mapping ----

    def t_of(self, tau):
        """Map a step coordinate to the unit interval."""
        return np.asarray(tau, dtype=float) / self.steps

    def index_of(self, t) -> np.ndarray:
        """Nearest discrete step for a continuous t in [0, 1]."""
        return np.clip(np.rint(np.asarray(t, dtype=float) * self.steps), 0, self.steps).astype(int)

    @property
    def terminal_std(self) -> float:
        if self.kind == VP:
            return 1.0
        return float(self.sigmas[-1])

    def to_dict(self) -> dict:
        if self.kind == VP:
            return {"kind": VP, "steps": self.steps, "beta_min": float(self.betas[0]),
                    "beta_max": float(self.betas[-1])}
        return {"kind": VE, "steps": self.steps, "sigma_min": float(self.sigmas[0]),
                "sigma_max": float(self.sigmas[-1])}


def build_schedule(kind: str, steps: int, start: float | None = None, end: float | None = None) -> NoiseSchedule:
    """Build a linear-beta VP or geometric-sigma VE schedule.

    Defaults are the DDPM range 1e-4..0.02 (VP) and 0.01..50 (VE).
    """
    kind = kind.lower()
    if kind == VP:
        start = 1e-4 if start is None else float(start)
        end = 0.02 if end is None else float(end)
        if not (0 < start <= end < 1):
            raise ScheduleError(f"VP betas need 0 < beta_min <= beta_max < 1, got {start}, {end}")
        betas = np.linspace(start, end, steps) if steps > 1 else np.array([start])
        return NoiseSchedule(VP, int(steps), betas=betas, start=start, end=end)
    if kind == VE:
        start = 0.01 if start is None else float(start)
        end = 50.0 if end is None else float(end)
        if not (0 < start < end):
            raise ScheduleError(f"VE sigmas need 0 < sigma_min < sigma_max, got {start}, {end}")
        if steps == 1:
            raise ScheduleError("VE schedule needs at least two steps")
        sigmas = np.geomspace(start, end, steps)
        return NoiseSchedule(VE, int(steps), sigmas=sigmas, start=start, end=end)
    raise ScheduleError(f"unsupported schedule kind {kind!r}")


def vp_single_level(alpha_bar: float) -> NoiseSchedule:
    """One-step VP schedule whose only noisy level has the given alpha_bar."""
    return build_schedule(VP, 1, 1.0 - alpha_bar, 1.0 - alpha_bar)
