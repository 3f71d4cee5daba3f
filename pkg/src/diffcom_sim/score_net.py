"""Small time-conditioned MLP score network with hand-written gradients.

Layer ``l`` computes ``a_l = h_{l-1} @ W_l.T + b_l``; hidden layers apply a
smooth activation, the last layer is linear. The input is ``x`` concatenated
with an embedding of the continuous noise coordinate ``t`` in [0, 1].

Besides ordinary backprop the module carries a forward-mode tangent pass and
its adjoint, which is what the implicit score-matching loss needs: the trace
of the input Jacobian and its parameter gradient.

Binary file layout (all values little-endian float64)::

    [version, activation code, embedding code, L,
     out_1, in_1, ..., out_L, in_L,
     W_1 (row-major), b_1, ..., W_L, b_L]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import GaussianMixture, perturbed_marginal
from .schedule import NoiseSchedule, VP

ACTIVATIONS = ("tanh", "silu", "softplus", "identity")
EMBEDDINGS = ("sinusoidal", "scalar", "none")
EMBED_FREQS = np.pi * np.array([0.5, 1.0])
FILE_VERSION = 1.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss {loss!r}); lower the learning rate")
        self.step = step
        self.loss = loss


def _act(name, a):
    """Return phi(a), phi'(a), phi''(a)."""
    if name == "tanh":
        f = np.tanh(a)
        d1 = 1.0 - f * f
        return f, d1, -2.0 * f * d1
    if name == "silu":
        sg = 0.5 * (1.0 + np.tanh(0.5 * a))
        ds = sg * (1.0 - sg)
        return a * sg, sg + a * ds, ds * (2.0 + a * (1.0 - 2.0 * sg))
    if name == "softplus":
        sg = 0.5 * (1.0 + np.tanh(0.5 * a))
        return np.logaddexp(0.0, a), sg, sg * (1.0 - sg)
    if name == "identity":
        return a, np.ones_like(a), np.zeros_like(a)
    raise ValueError(f"unknown activation {name!r}")


def embed_time(t, n, kind):
    t = np.asarray(t, dtype=float)
    t = np.full(n, t.item()) if t.size == 1 else t.reshape(n)
    if kind == "sinusoidal":
        w = t[:, None] * EMBED_FREQS[None, :]
        return np.concatenate([np.sin(w), np.cos(w)], axis=1)
    if kind == "scalar":
        return t[:, None].copy()
    return np.empty((n, 0))


def embed_width(kind):
    return {"sinusoidal": 2 * EMBED_FREQS.size, "scalar": 1, "none": 0}[kind]


@dataclass
class ScoreNetwork:
    weights: list
    biases: list
    activation: str = "tanh"
    embedding: str = "sinusoidal"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"unknown time embedding {self.embedding!r}")
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} vs weight {w.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {w.shape[1]} != {self.weights[l - 1].shape[0]}")
        if self.weights[0].shape[1] != self.dim + embed_width(self.embedding):
            raise ValueError("output dimension must equal input dimension")
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("parameters must be finite")

    @classmethod
    def init(cls, dim: int, hidden=(32, 32), activation="tanh", embedding="sinusoidal", seed: int = 0, zero=False):
        rng = np.random.default_rng(seed)
        sizes = [dim + embed_width(embedding), *hidden, dim]
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = np.zeros((fan_out, fan_in)) if zero else rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            ws.append(w)
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, activation, embedding)

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def with_flat(self, vec) -> "ScoreNetwork":
        vec = np.asarray(vec, dtype=float)
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[k:k + w.size].reshape(w.shape))
            k += w.size
            bs.append(vec[k:k + b.size].copy())
            k += b.size
        if k != vec.size:
            raise ValueError("flat parameter vector has the wrong length")
        return ScoreNetwork(ws, bs, self.activation, self.embedding)

    def __call__(self, x, t):
        return net_eval(self, x, t)

    def as_scorefn(self, sched: NoiseSchedule):
        """Adapter to the engine's ``scorefn(x, tau)`` convention."""
        return _NetScore(self, sched)

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if x.size == self.dim else x[:, None]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {np.shape(x)}")
        return x, np.concatenate([x, embed_time(t, x.shape[0], self.embedding)], axis=1)

    def forward(self, x, t, keep=False):
        x, h = self._inputs(x, t)
        acts = [h]
        pre = []
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            if l == last:
                h = a
            else:
                pre.append(a)
                h = _act(self.activation, a)[0]
                acts.append(h)
        if keep:
            return h, (acts, pre)
        return h

    def backward(self, cache, g_out):
        """Parameter gradients of ``sum(g_out * out)``."""
        acts, pre = cache
        grads = []
        g = g_out
        for l in range(len(self.weights) - 1, -1, -1):
            grads.append((g.T @ acts[l], g.sum(axis=0)))
            if l:
                g = (g @ self.weights[l]) * _act(self.activation, pre[l - 1])[1]
        grads.reverse()
        return [p for pair in grads for p in pair]

    def input_jacobian(self, x, t):
        """(n, D, D) Jacobian of the output in x by D tangent passes."""
        x, _ = self._inputs(x, t)
        _, (_, pre) = self.forward(x, t, keep=True)
        tan = _tangents(self, pre, x.shape[0])
        return np.moveaxis(tan[-1], 0, 2)


class _NetScore:
    def __init__(self, net, sched):
        self.net, self.sched = net, sched

    def __call__(self, x, tau):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return net_eval(self.net, x, float(tau) / self.sched.steps).reshape(x.shape)


def net_eval(net: ScoreNetwork, x, t):
    """Forward pass at continuous noise coordinate ``t`` in [0, 1]."""
    return net.forward(x, t)


def _tangents(net, pre, n):
    """Forward-mode tangents along each input coordinate: list of (D, n, width)."""
    D = net.dim
    w0 = net.weights[0][:, :D]
    dot = np.broadcast_to(w0.T[:, None, :], (D, n, w0.shape[0])).copy()
    tans = [dot]
    for l in range(1, len(net.weights)):
        dh = _act(net.activation, pre[l - 1])[1][None] * dot
        dot = dh @ net.weights[l].T
        tans.append(dot)
    return tans


def eps_from_score(s, sigma):
    return -np.asarray(sigma, dtype=float) * np.asarray(s, dtype=float)


def score_from_eps(eps, sigma):
    return -np.asarray(eps, dtype=float) / np.asarray(sigma, dtype=float)


def grad_check(net: ScoreNetwork, x, t, step: float = 1e-5) -> float:
    """Max error of backprop against central differences on ½‖out‖².

    The error is normalized by the largest analytic gradient entry, so a
    network whose gradients all vanish reports 0.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-7, 1e-3]")
    out, cache = net.forward(x, t, keep=True)
    g = np.concatenate([p.ravel() for p in net.backward(cache, out)])
    theta = net.flat()
    fd = np.empty_like(theta)
    for j in range(theta.size):
        tp = theta.copy()
        tp[j] += step
        tm = theta.copy()
        tm[j] -= step
        fp = 0.5 * np.sum(net_eval(net.with_flat(tp), x, t) ** 2)
        fm = 0.5 * np.sum(net_eval(net.with_flat(tm), x, t) ** 2)
        fd[j] = (fp - fm) / (2 * step)
    scale = max(np.max(np.abs(g)), np.max(np.abs(fd)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(g - fd)) / scale)


# ---- denoising score matching ----

def _dsm_batch(gmm: GaussianMixture, sched: NoiseSchedule, batch: int, rng):
    x0, _ = gmm.sample(batch, int(rng.integers(2**63)))
    idx = rng.integers(1, sched.steps + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    if sched.kind == VP:
        a = np.sqrt(np.exp(sched._log_abar[idx]))[:, None]
        s = np.sqrt(-np.expm1(sched._log_abar[idx]))[:, None]
    else:
        a = np.ones((batch, 1))
        s = sched.sigmas[idx - 1][:, None]
    xt = a * x0 + s * eps
    return xt, idx / sched.steps, -eps / s


def dsm_loss(net, gmm: GaussianMixture, sched: NoiseSchedule, batch: int, seed: int) -> float:
    """Monte Carlo DSM loss E[½‖∇ log q(x̃|x) − s(x̃, t)‖²], steps uniform.

    ``net`` is a ScoreNetwork or any callable ``f(x, t)`` of the continuous
    coordinate ``t = i / N``.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    xt, t, target = _dsm_batch(gmm, sched, batch, np.random.default_rng(seed))
    out = net_eval(net, xt, t) if isinstance(net, ScoreNetwork) else np.asarray(net(xt, t)).reshape(xt.shape)
    return float(0.5 * np.mean(np.sum((target - out) ** 2, axis=1)))


def dsm_loss_grad(net: ScoreNetwork, gmm, sched, batch: int, seed: int):
    """(loss, flat parameter gradient) of the DSM estimate for one batch."""
    xt, t, target = _dsm_batch(gmm, sched, batch, np.random.default_rng(seed))
    return _dsm_value_grad(net, xt, t, target)


def _dsm_value_grad(net, xt, t, target):
    out, cache = net.forward(xt, t, keep=True)
    r = out - target
    n = xt.shape[0]
    loss = 0.5 * np.sum(r * r) / n
    g = net.backward(cache, r / n)
    return float(loss), np.concatenate([p.ravel() for p in g])


def score_mse(net, gmm: GaussianMixture, sched: NoiseSchedule, n: int, seed: int) -> float:
    """Mean squared error (per coordinate) against the analytic perturbed score,
    at steps drawn uniformly and points drawn from the matching marginals."""
    rng = np.random.default_rng(seed)
    xt, t, _ = _dsm_batch(gmm, sched, n, rng)
    idx = np.rint(t * sched.steps).astype(int)
    exact = np.empty_like(xt)
    for i in np.unique(idx):
        sel = idx == i
        exact[sel] = perturbed_marginal(gmm, sched, int(i)).score(xt[sel])
    out = net_eval(net, xt, t) if isinstance(net, ScoreNetwork) else np.asarray(net(xt, t)).reshape(xt.shape)
    return float(np.mean((out - exact) ** 2))


def score_mse_grid(net, gmm: GaussianMixture, sched: NoiseSchedule, ts=(0.1, 0.5, 0.9), points: int = 201) -> float:
    """Squared score error averaged over the levels ``ts`` (nearest step) and an
    even grid spanning +-3 standard deviations of each perturbed marginal (1-D)."""
    if gmm.dim != 1:
        raise ValueError("the grid score error is defined for 1-D sources")
    errs = []
    for t in ts:
        i = int(np.clip(np.rint(t * sched.steps), 1, sched.steps))
        m = perturbed_marginal(gmm, sched, i)
        mu, sd = float(m.mean()[0]), float(np.sqrt(m.covariance()[0, 0]))
        x = np.linspace(mu - 3 * sd, mu + 3 * sd, points)[:, None]
        out = net_eval(net, x, i / sched.steps) if isinstance(net, ScoreNetwork) else net(x, i / sched.steps)
        errs.append(np.mean((np.asarray(out).reshape(x.shape) - m.score(x)) ** 2))
    return float(np.mean(errs))


# ---- implicit score matching ----

def ism_loss(net: ScoreNetwork, samples, t: float = 0.0, weights=None) -> float:
    """Estimate of E[½‖s‖² + tr(∇ₓ s)] over the samples (optionally weighted)."""
    return ism_loss_grad(net, samples, t, weights, need_grad=False)[0]


def ism_loss_grad(net: ScoreNetwork, samples, t: float = 0.0, weights=None, need_grad=True):
    """ISM value and its flat parameter gradient.

    ``weights`` turns the sample mean into a weighted sum, e.g. quadrature
    weights on a grid.
    """
    if net.dim > 3:
        raise ValueError("ISM needs the exact Jacobian trace; only D <= 3 is supported")
    x, _ = net._inputs(samples, t)
    n, D = x.shape
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
    out, (acts, pre) = net.forward(x, t, keep=True)
    tans = _tangents(net, pre, n)
    trace = sum(tans[-1][d, :, d] for d in range(D))
    value = float(np.sum(w * (0.5 * np.sum(out**2, axis=1) + trace)))
    if not need_grad:
        return value, None
    # adjoint of the primal and tangent passes together
    L = len(net.weights)
    ga = out * w[:, None]
    gdot = np.zeros_like(tans[-1])
    for d in range(D):
        gdot[d, :, d] = w
    grads = [None] * L
    for l in range(L - 1, -1, -1):
        if l == 0:
            h_prev = acts[0]
            gw = ga.T @ h_prev
            gw[:, :D] += sum(gdot[d].sum(axis=0)[:, None] * (np.arange(D) == d)[None, :] for d in range(D))
            grads[0] = (gw, ga.sum(axis=0))
            break
        d1, d2 = _act(net.activation, pre[l - 1])[1:]
        hdot = d1[None] * tans[l - 1]
        gw = ga.T @ acts[l] + np.einsum("dno,dni->oi", gdot, hdot)
        grads[l] = (gw, ga.sum(axis=0))
        gh = ga @ net.weights[l]
        ghdot = gdot @ net.weights[l]
        ga = gh * d1 + np.sum(ghdot * d2[None] * tans[l - 1], axis=0)
        gdot = ghdot * d1[None]
    flat = np.concatenate([p.ravel() for pair in grads for p in pair])
    return value, flat


# ---- training ----

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 20000
    batch_size: int = 256
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def train_dsm(net: ScoreNetwork, gmm: GaussianMixture, sched: NoiseSchedule, cfg: TrainConfig,
              trace: list | None = None) -> ScoreNetwork:
    """Plain (optionally heavy-ball) gradient descent on the DSM loss.

    Per-step losses are appended to ``trace`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = net.flat()
    vel = np.zeros_like(theta)
    cur = net
    for k in range(cfg.steps):
        xt, t, target = _dsm_batch(gmm, sched, cfg.batch_size, rng)
        loss, g = _dsm_value_grad(cur, xt, t, target)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise TrainingDiverged(k, loss)
        vel = cfg.momentum * vel - cfg.learning_rate * g
        theta = theta + vel
        if not np.all(np.isfinite(theta)):
            raise TrainingDiverged(k, loss)
        cur = cur.with_flat(theta)
        if trace is not None:
            trace.append(loss)
    return cur


# ---- serialization ----

def save_network(net: ScoreNetwork, path):
    header = [FILE_VERSION, ACTIVATIONS.index(net.activation), EMBEDDINGS.index(net.embedding), len(net.weights)]
    for w in net.weights:
        header += list(w.shape)
    np.concatenate([np.asarray(header, dtype=float), net.flat()]).astype("<f8").tofile(path)


def load_network(path) -> ScoreNetwork:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size < 4 or raw[0] != FILE_VERSION:
        raise ValueError(f"{path}: not a score-network file")
    act, emb, L = ACTIVATIONS[int(raw[1])], EMBEDDINGS[int(raw[2])], int(raw[3])
    shapes = raw[4:4 + 2 * L].astype(int).reshape(L, 2)
    body = raw[4 + 2 * L:]
    ws, bs, k = [], [], 0
    for o, i in shapes:
        ws.append(body[k:k + o * i].reshape(o, i))
        k += o * i
        bs.append(body[k:k + o])
        k += o
    if k != body.size:
        raise ValueError(f"{path}: parameter count does not match header")
    return ScoreNetwork(ws, bs, act, emb)
