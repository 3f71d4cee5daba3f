"""Semantic encoders, AWGN / multipath Rayleigh channels and the composed
forward operator ``y = H(E(x)) + n``.

All signals are real. A complex tap is drawn as an interleaved (re, im) pair
and applied through its magnitude, i.e. the receiver is assumed to know and
undo the tap phase. With ``sigma_h^2 = 1 / L`` per tap the total path power
``E sum |h_l|^2`` is 1.

Batches are ``(n, D)`` sources and ``(n, m)`` channel symbols.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CHANNEL_KINDS = ("awgn", "fading")
PINV_REG = 1e-8


def snr_to_noise_var(snr_db: float) -> float:
    """Noise variance for unit-power symbols; ``inf`` dB means noiseless."""
    if np.isposinf(snr_db):
        return 0.0
    return float(10.0 ** (-float(snr_db) / 10.0))


def _rows(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[None, :] if x.size == dim else x[:, None]
    if x.shape[1] != dim:
        raise ValueError(f"expected vectors of length {dim}, got shape {np.shape(x)}")
    return x


# ---- encoders ----

class LinearEncoder:
    """z = M x (+ bias)."""

    linear = True

    def __init__(self, matrix, bias=None):
        M = np.array(matrix, dtype=float, ndmin=2)
        if M.shape[0] < 1 or not np.all(np.isfinite(M)):
            raise ValueError("encoder matrix must be finite with m >= 1 rows")
        self.matrix = M
        self.bias = None if bias is None else np.asarray(bias, dtype=float).reshape(M.shape[0])

    @property
    def in_dim(self):
        return self.matrix.shape[1]

    @property
    def out_dim(self):
        return self.matrix.shape[0]

    def __call__(self, x):
        z = _rows(x, self.in_dim) @ self.matrix.T
        return z if self.bias is None else z + self.bias

    def vjp(self, x, u):
        return np.asarray(u, dtype=float) @ self.matrix

    def jvp(self, x, v):
        return np.asarray(v, dtype=float) @ self.matrix.T

    def adjoint(self, u):
        return np.asarray(u, dtype=float) @ self.matrix


class NetworkEncoder:
    """Nonlinear encoder: the first ``m`` outputs of a score-network-shaped map at t = 0."""

    linear = False

    def __init__(self, net, m: int | None = None, fd_step: float = 1e-6):
        self.net = net
        self.m = net.dim if m is None else int(m)
        if not 1 <= self.m <= net.dim:
            raise ValueError("encoder output width must lie in 1..D")
        self.fd_step = fd_step

    @property
    def in_dim(self):
        return self.net.dim

    @property
    def out_dim(self):
        return self.m

    def __call__(self, x):
        return self.net(_rows(x, self.in_dim), 0.0)[:, : self.m]

    def jacobian(self, x):
        """(n, m, D) by forward differences."""
        x = _rows(x, self.in_dim)
        base = self(x)
        J = np.empty((x.shape[0], self.m, self.in_dim))
        for j in range(self.in_dim):
            e = np.zeros(self.in_dim)
            e[j] = self.fd_step
            J[:, :, j] = (self(x + e) - base) / self.fd_step
        return J

    def vjp(self, x, u):
        return np.einsum("nmd,nm->nd", self.jacobian(x), np.asarray(u, dtype=float))

    def jvp(self, x, v):
        return np.einsum("nmd,nd->nm", self.jacobian(x), np.asarray(v, dtype=float))


def encode(enc, x):
    return enc(x)


# ---- channel state and elementary channels ----

@dataclass
class ChannelState:
    taps: np.ndarray
    sigma_h: float = 1.0

    def __post_init__(self):
        self.taps = np.atleast_1d(np.asarray(self.taps, dtype=float))
        if self.taps.ndim != 1 or self.taps.size < 1:
            raise ValueError("channel needs L >= 1 taps")

    @property
    def L(self):
        return self.taps.size


def rayleigh_taps(L: int, seed: int, n: int | None = None, sigma_h: float | None = None):
    """Tap magnitudes |h_l| with h_l ~ CN(0, sigma_h^2), sigma_h^2 = 1/L by default.

    Returns shape ``(L,)``, or ``(n, L)`` when ``n`` is given.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    s2 = 1.0 / L if sigma_h is None else float(sigma_h) ** 2
    rng = np.random.default_rng(seed)
    shape = (1 if n is None else n, L, 2)
    pairs = rng.standard_normal(shape) * np.sqrt(s2 / 2.0)
    mag = np.hypot(pairs[..., 0], pairs[..., 1])
    return mag[0] if n is None else mag


def rayleigh_state(L: int, seed: int, sigma_h: float | None = None) -> ChannelState:
    s = np.sqrt(1.0 / L) if sigma_h is None else float(sigma_h)
    return ChannelState(rayleigh_taps(L, seed, sigma_h=s), s)


def power_normalize(z):
    """Scale to unit mean-square amplitude (per row for 2-D input)."""
    z = np.asarray(z, dtype=float)
    p = np.mean(z * z, axis=-1, keepdims=True)
    if np.any(p == 0):
        raise ValueError("cannot power-normalize an all-zero signal")
    return z / np.sqrt(p)


def awgn(z, snr_db: float, seed: int):
    """Add N(0, 10^(-snr/10)) noise; ``inf`` dB returns the input."""
    z = np.asarray(z, dtype=float)
    var = snr_to_noise_var(snr_db)
    if var == 0.0:
        return z.copy()
    return z + np.sqrt(var) * np.random.default_rng(seed).standard_normal(z.shape)


def circulant(taps, m: int) -> np.ndarray:
    """m x m matrix of circular convolution with the given taps."""
    taps = np.atleast_1d(np.asarray(taps, dtype=float))
    if taps.size > m:
        raise ValueError(f"{taps.size} taps exceed block length {m}")
    col = np.zeros(m)
    col[: taps.size] = taps
    return np.stack([np.roll(col, k) for k in range(m)], axis=1)


def apply_taps(z, taps):
    """Circular convolution along the last axis (scalar gain when L = 1)."""
    z = np.asarray(z, dtype=float)
    taps = np.atleast_1d(np.asarray(taps, dtype=float))
    if taps.size == 1:
        return taps[0] * z
    out = np.zeros_like(z)
    for l, h in enumerate(taps):
        out += h * np.roll(z, l, axis=-1)
    return out


def fading(z, state: ChannelState, snr_db: float, seed: int):
    """y = h * z + n (circular convolution for L > 1); noise drawn as in ``awgn``."""
    return awgn(apply_taps(z, state.taps), snr_db, seed)


# ---- composed operator ----

@dataclass
class ChannelSpec:
    kind: str = "awgn"
    snr_db: float = 10.0
    L: int = 1
    sigma_h: float | None = None

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.L < 1:
            raise ValueError("L must be >= 1")


@dataclass
class ForwardOperator:
    """A = H o (c * E) with additive N(0, sigma_n^2) noise.

    ``power_scale`` is a fixed constant (see ``calibrate_power``), so linear
    encoders give a linear operator.
    """

    encoder: object
    kind: str = "awgn"
    state: ChannelState = field(default_factory=lambda: ChannelState([1.0]))
    sigma_n: float = 0.0
    power_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not self.sigma_n >= 0:
            raise ValueError("sigma_n must be >= 0")
        if self.kind == "awgn" and not np.array_equal(self.state.taps, [1.0]):
            raise ValueError("awgn channel carries no taps")
        if self.state.L > self.out_dim:
            raise ValueError(f"{self.state.L} taps exceed {self.out_dim} channel uses")

    @property
    def in_dim(self):
        return self.encoder.in_dim

    @property
    def out_dim(self):
        return self.encoder.out_dim

    @property
    def linear(self):
        return bool(getattr(self.encoder, "linear", False))

    def cbr(self) -> float:
        return self.out_dim / self.in_dim

    def channel_matrix(self) -> np.ndarray:
        return circulant(self.state.taps, self.out_dim)

    def channel_pinv(self) -> np.ndarray:
        if self.kind == "awgn":
            return np.eye(self.out_dim)
        H = self.channel_matrix()
        return np.linalg.solve(H.T @ H + PINV_REG * np.eye(H.shape[0]), H.T)

    def mean_apply(self, x):
        """Noiseless H(E(x)) for the fixed taps."""
        return apply_taps(self.power_scale * self.encoder(x), self.state.taps)

    def apply(self, x, seed: int):
        y = self.mean_apply(x)
        if self.sigma_n == 0:
            return y
        return y + self.sigma_n * np.random.default_rng(seed).standard_normal(y.shape)

    def matrix(self) -> np.ndarray:
        """(m, D) linear part of the operator."""
        if not self.linear:
            raise TypeError("operator is nonlinear")
        return self.channel_matrix() @ (self.power_scale * self.encoder.matrix)

    def offset(self) -> np.ndarray:
        b = getattr(self.encoder, "bias", None)
        if b is None:
            return np.zeros(self.out_dim)
        return self.channel_matrix() @ (self.power_scale * b)

    def vjp(self, x, u):
        """J_A(x)^T u for each row."""
        u = np.asarray(u, dtype=float)
        back = apply_taps_adjoint(u, self.state.taps) * self.power_scale
        return self.encoder.vjp(x, back)

    def jvp(self, x, v):
        return apply_taps(self.power_scale * self.encoder.jvp(x, v), self.state.taps)


def apply_taps_adjoint(u, taps):
    taps = np.atleast_1d(np.asarray(taps, dtype=float))
    if taps.size == 1:
        return taps[0] * u
    out = np.zeros_like(u)
    for l, h in enumerate(taps):
        out += h * np.roll(u, -l, axis=-1)
    return out


def calibrate_power(enc, gmm) -> float:
    """Constant c with E||c E(x)||^2 / m = 1 under the source mixture."""
    if getattr(enc, "linear", False):
        second = gmm.covariance() + np.outer(gmm.mean(), gmm.mean())
        M = enc.matrix
        p = np.trace(M @ second @ M.T)
        if enc.bias is not None:
            p += 2 * enc.bias @ M @ gmm.mean() + enc.bias @ enc.bias
        p /= enc.out_dim
    else:
        x, _ = gmm.sample(200_000, seed=12345)
        p = float(np.mean(enc(x) ** 2))
    if p <= 0:
        raise ValueError("encoder output has zero power")
    return float(1.0 / np.sqrt(p))


def compose(enc, spec: ChannelSpec, state: ChannelState | None = None, sigma_n: float | None = None,
            power_scale: float = 1.0) -> ForwardOperator:
    """Build the forward operator; ``sigma_n`` defaults to the channel SNR."""
    if sigma_n is None:
        sigma_n = np.sqrt(snr_to_noise_var(spec.snr_db))
    if spec.kind == "awgn":
        state = ChannelState([1.0])
    elif state is None:
        raise ValueError("fading channel needs a ChannelState")
    elif state.L != spec.L:
        raise ValueError(f"state has {state.L} taps, spec asks for {spec.L}")
    return ForwardOperator(enc, spec.kind, state, float(sigma_n), power_scale)


def condition_number(A) -> float:
    """Ratio of largest to smallest nonzero singular value."""
    A = np.array(A, dtype=float, ndmin=2)
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("condition number of a zero matrix is undefined")
    tol = s[0] * max(A.shape) * np.finfo(float).eps
    nz = s[s > tol]
    return float(nz[0] / nz[-1])
