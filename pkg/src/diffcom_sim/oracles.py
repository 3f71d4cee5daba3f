"""Independent ground truth: conjugate Gaussian posteriors, brute-force grids,
empirical distances, moments, PSNR / SNR and feasibility checks.

Nothing here calls the samplers, so these can referee them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12):
            raise ValueError("posterior covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(self.covariance)) < -1e-12:
            raise ValueError("posterior covariance must be positive semidefinite")

    def log_density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x - self.mean
        P = np.linalg.inv(self.covariance)
        _, logdet = np.linalg.slogdet(self.covariance)
        return -0.5 * (np.einsum("ni,ij,nj->n", d, P, d) + logdet + self.mean.size * np.log(2 * np.pi))


def conjugate_posterior(prior_mean, prior_cov, A, sigma_n: float, y) -> GaussianPosterior:
    """Posterior of x ~ N(mu, S) given y = A x + N(0, sigma_n^2 I)."""
    mu = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    S = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    A = np.array(A, dtype=float, ndmin=2)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if A.shape != (y.size, mu.size) or S.shape != (mu.size, mu.size):
        raise ValueError("shapes of prior, operator and measurement are incompatible")
    if not sigma_n > 0:
        raise ValueError("sigma_n must be positive")
    try:
        Sinv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise ValueError("prior covariance is singular") from None
    P = Sinv + A.T @ A / sigma_n**2
    C = np.linalg.inv(P)
    C = 0.5 * (C + C.T)
    return GaussianPosterior(C @ (Sinv @ mu + A.T @ y / sigma_n**2), C)


def conditional_score_linear_gaussian(prior_mean, prior_cov, A, sigma_n, y, x_t, alpha, sigma):
    """Exact grad log p_t(x_t | y) for x_t = alpha x0 + sigma eps, Gaussian x0 and channel."""
    mu = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    S = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    post = conjugate_posterior(mu, S, A, sigma_n, y)
    cov_t = alpha**2 * post.covariance + sigma**2 * np.eye(mu.size)
    d = np.atleast_2d(x_t) - alpha * post.mean
    return -np.linalg.solve(cov_t, d.T).T


def grid_axes(bounds, resolution):
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (bounds.shape[0],))
    return [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, res)]


def grid_map(logp, bounds, resolution):
    """Brute-force argmax of ``logp`` on a grid (D <= 2); ties go to the lowest index.

    ``logp`` takes an (n, D) array. Returns ``(point, cell_widths)``.
    """
    axes = grid_axes(bounds, resolution)
    if len(axes) > 2:
        raise ValueError("grid search supports D <= 2")
    if any(a.size < 16 for a in axes):
        raise ValueError("resolution must be >= 16 per axis")
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.asarray(logp(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(vals)):
        raise ValueError("log-posterior is not finite on the whole grid")
    k = int(np.argmax(vals))
    widths = np.array([a[1] - a[0] for a in axes])
    return pts[k], widths


def grid_cell_index(point, bounds, resolution):
    """Index of the nearest grid node to ``point`` (the node's cell)."""
    axes = grid_axes(bounds, resolution)
    return tuple(int(np.argmin(np.abs(a - p))) for a, p in zip(axes, np.atleast_1d(point)))


def grid_posterior_moments(logp, bounds, resolution):
    """Mean and covariance of exp(logp) by normalized grid integration."""
    axes = grid_axes(bounds, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    lp = np.asarray(logp(pts), dtype=float)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    mean = w @ pts
    d = pts - mean
    return mean, (w[:, None] * d).T @ d


def w1_1d(a, b):
    """Exact W1 between equal-weight empirical measures (resampled to equal size)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size != b.size:
        n = max(a.size, b.size)
        q = (np.arange(n) + 0.5) / n
        a = np.quantile(a, q, method="inverted_cdf")
        b = np.quantile(b, q, method="inverted_cdf")
    return float(np.mean(np.abs(a - b)))


def moments(samples):
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def mse_psnr(x, xhat, peak: float = 1.0):
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - xhat) ** 2))
    psnr = np.inf if mse == 0 else 10.0 * np.log10(peak**2 / mse)
    return mse, float(psnr)


def measured_snr(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if clean.shape != noisy.shape:
        raise ValueError("shape mismatch")
    ps = float(np.sum(clean**2))
    if ps == 0:
        raise ValueError("clean signal is zero")
    pn = float(np.sum((noisy - clean) ** 2))
    return np.inf if pn == 0 else 10.0 * np.log10(ps / pn)


@dataclass(frozen=True)
class FeasibleSetQuery:
    epsilon: float

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError("epsilon must be finite and >= 0")

    @classmethod
    def from_noise(cls, m: int, sigma_n: float):
        """Default tolerance: the expected squared residual m * sigma_n^2."""
        return cls(m * sigma_n**2)


def feasible(y, op, x, q: FeasibleSetQuery) -> bool:
    r = np.asarray(y, dtype=float) - op.mean_apply(x)
    return bool(np.sum(r * r) <= q.epsilon)


def power_iteration_condition(A, tol: float = 1e-15, max_iter: int = 200_000, seed: int = 0) -> float:
    """sqrt(lmax / lmin) of A^T A by plain and shifted power iteration."""
    A = np.array(A, dtype=float, ndmin=2)
    G = A.T @ A
    rng = np.random.default_rng(seed)

    def top(M):
        v = rng.standard_normal(M.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = M @ v
            new = float(v @ w)
            v = w / np.linalg.norm(w)
            if abs(new - lam) <= tol * abs(new):
                return new
            lam = new
        return lam

    lmax = top(G)
    lmin = lmax - top(lmax * np.eye(G.shape[0]) - G)
    return float(np.sqrt(lmax / lmin))


def fm_gaussian_floor(v0: float = 1.0, v1: float = 4.0) -> float:
    """Irreducible flow-matching loss E[Var(x1 - x0 | x_t)] for independent
    N(0, v0) -> N(0, v1) coupling, by 1-D quadrature over t."""
    def resid(t):
        var_xt = (1 - t) ** 2 * v0 + t**2 * v1
        cov = t * v1 - (1 - t) * v0
        return (v0 + v1) - cov**2 / var_xt

    val, _ = integrate.quad(resid, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    return float(val)


def dps_conjugate_moments(sched, prior_var=1.0, a=1.0, sigma_n=1.0, y=2.0, gamma=None, final_noise=True):
    """Exact output law of DPS-guided VP ancestral sampling, scalar Gaussian case.

    The guided score is affine in x_t, so the chain mean and variance follow
    a deterministic recursion. Returns ``(mean, variance)``.
    """
    gamma = 1.0 / (2 * sigma_n**2) if gamma is None else gamma
    m, v = 0.0, 1.0
    for i in range(sched.steps, 0, -1):
        al = float(sched.alpha(i))
        s2 = float(sched.sigma(i)) ** 2
        var_t = al**2 * prior_var + s2
        # score = -x / var_t ; x_hat = k x with k = (1 - s2 / var_t) / al
        k = (1.0 - s2 / var_t) / al
        # guided score = -x/var_t + 2 gamma k a (y - a k x)
        slope = -1.0 / var_t - 2 * gamma * (k * a) ** 2
        icpt = 2 * gamma * k * a * y
        b = sched.beta(i)
        c = 1.0 / np.sqrt(1.0 - b)
        m = c * ((1 + b * slope) * m + b * icpt)
        v = c**2 * (1 + b * slope) ** 2 * v + (b if (i > 1 or final_noise) else 0.0)
    return m, v


def mixture_moments_1d(gmm):
    """Exact mean, variance and fourth central moment of the first coordinate."""
    w = gmm.weights
    mu = gmm.means[:, 0]
    v = gmm.covariances[:, 0, 0]
    m = float(w @ mu)
    d = mu - m
    var = float(w @ (d * d + v))
    m4 = float(w @ (d**4 + 6 * d * d * v + 3 * v * v))
    return m, var, m4


def moment_z_scores(samples, gmm):
    """Errors of the sample mean and variance in units of their standard errors."""
    x = np.asarray(samples, dtype=float).reshape(len(samples), -1)[:, 0]
    n = x.size
    m, var, m4 = mixture_moments_1d(gmm)
    se_m = np.sqrt(var / n)
    se_v = np.sqrt((m4 - var * var) / n)
    return float((x.mean() - m) / se_m), float((x.var(ddof=1) - var) / se_v)
