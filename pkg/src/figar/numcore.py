"""Dense numerics: flat parameter storage, small MLPs with hand-written
backprop and forward-mode tangents, probability helpers, optimizers and a
central-difference gradient checker.

Everything is float64. Batches are row-major ``(batch, features)``; a 1-D
input is treated as a batch of one and the output is squeezed back.
"""
import math
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from figar.errors import ConfigurationError, NumericError, UsageError

LOG_2PI = math.log(2.0 * math.pi)


def make_rng(seed, *keys):
    """Independent generator for ``seed`` and a path of int/str keys.

    String keys are hashed with crc32 so that, e.g., the action head of two
    differently shaped agents draws identical initial weights.
    """
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(words)


class ParamVector:
    """Flat float64 buffer with a named segment layout.

    Segments are contiguous and laid out in declaration order, so any run of
    segments sharing a name prefix can be exposed as a sub-vector that
    aliases the same memory.
    """

    def __init__(self, layout, values=None):
        layout = [(str(n), tuple(int(d) for d in s)) for n, s in layout]
        names = [n for n, _ in layout]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate segment names in {names}")
        self.layout = layout
        self._offsets = {}
        off = 0
        for name, shape in layout:
            size = int(np.prod(shape)) if shape else 1
            self._offsets[name] = (off, off + size, shape)
            off += size
        if values is None:
            values = np.zeros(off)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != off:
            raise ConfigurationError(f"values of size {values.size} do not match layout size {off}")
        self.values = values
        self._lock = threading.Lock()

    @property
    def size(self):
        return self.values.size

    def __len__(self):
        return self.values.size

    def names(self):
        return [n for n, _ in self.layout]

    def slice(self, name):
        start, stop, _ = self._offsets[name]
        return slice(start, stop)

    def prefix_slice(self, prefix):
        """Slice spanning every segment whose name starts with ``prefix``."""
        hits = [self._offsets[n] for n, _ in self.layout if n.startswith(prefix)]
        if not hits:
            return slice(0, 0)
        start, stop = hits[0][0], hits[-1][1]
        if stop - start != sum(h[1] - h[0] for h in hits):
            raise ConfigurationError(f"segments with prefix {prefix!r} are not contiguous")
        return slice(start, stop)

    def __getitem__(self, name):
        start, stop, shape = self._offsets[name]
        return self.values[start:stop].reshape(shape)

    def sub(self, prefix):
        """Aliasing sub-vector over the segments starting with ``prefix``."""
        sl = self.prefix_slice(prefix)
        layout = [(n[len(prefix):], s) for n, s in self.layout if n.startswith(prefix)]
        return ParamVector(layout, self.values[sl])

    def copy(self):
        return ParamVector(self.layout, self.values.copy())

    def zeros_like(self):
        return ParamVector(self.layout)

    def same_layout(self, other):
        return self.layout == other.layout

    def snapshot(self):
        with self._lock:
            return self.values.copy()

    def accumulate(self, delta, scale=1.0):
        """In-place ``values += scale * delta``; safe to call from several threads."""
        with self._lock:
            self.values += scale * np.asarray(delta)


# ---------------------------------------------------------------------------
# activations and output transforms

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("linear", "softmax", "tanh", "sigmoid", "relu")


class Mlp:
    """Fully connected network ``x -> W0 -> act -> ... -> W_last -> transform``.

    ``output`` is one of ``linear``, ``softmax``, ``tanh`` or ``sigmoid``
    (the bounded transforms are rescaled to ``bounds``), or ``relu`` when the
    network is used as an inner block of a larger model.

    The most recent :meth:`forward` is cached; :meth:`backward` and
    :meth:`jvp` consume that cache.
    """

    def __init__(self, layer_sizes, activation="tanh", output="linear", params=None,
                 bounds=None, rng=None, final_scale=1.0):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ConfigurationError(f"invalid layer sizes {layer_sizes}")
        n_hidden = len(layer_sizes) - 2
        if isinstance(activation, str):
            activation = [activation] * n_hidden
        activation = list(activation)
        if len(activation) != n_hidden or any(a not in HIDDEN_ACTIVATIONS for a in activation):
            raise ConfigurationError(f"invalid hidden activations {activation}")
        if output not in OUTPUT_TRANSFORMS:
            raise ConfigurationError(f"unknown output transform {output!r}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.output = output
        out_dim = layer_sizes[-1]
        if bounds is None:
            lo, hi = (np.zeros(out_dim), np.ones(out_dim)) if output == "sigmoid" else (-np.ones(out_dim), np.ones(out_dim))
        else:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (out_dim,)).copy() for b in bounds)
        if np.any(lo >= hi):
            raise ConfigurationError("output bounds need lower < upper")
        self.lower, self.upper = lo, hi
        self._center = (hi + lo) / 2.0
        self._half = (hi - lo) / 2.0
        if params is None:
            params = ParamVector(self.layout(layer_sizes))
        elif params.layout != self.layout(layer_sizes):
            raise ConfigurationError("parameter layout does not match layer sizes")
        self.params = params
        self._cache = None
        if rng is not None:
            self.init_params(rng, final_scale)

    @staticmethod
    def layout(layer_sizes):
        segs = []
        for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            segs.append((f"W{i}", (n_in, n_out)))
            segs.append((f"b{i}", (n_out,)))
        return segs

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def init_params(self, rng, final_scale=1.0):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases; last layer scaled."""
        for i in range(self.n_layers):
            W = self.params[f"W{i}"]
            bound = 1.0 / math.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            if i == self.n_layers - 1:
                W *= final_scale
            self.params[f"b{i}"][...] = 0.0

    # -- forward -----------------------------------------------------------

    def forward_full(self, x):
        """Return ``(output, pre_output)``; both keep the batch shape of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ConfigurationError(f"input has shape {x.shape}, expected (..., {self.in_dim})")
        hs = [X]
        h = X
        z = None
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(z) if self.activation[i] == "tanh" else np.maximum(z, 0.0)
                hs.append(h)
        y = self._transform(z)
        self._cache = (single, hs, z, y)
        if single:
            return y[0], z[0]
        return y, z

    def forward(self, x):
        return self.forward_full(x)[0]

    def __call__(self, x):
        return self.forward(x)

    def _transform(self, z):
        if self.output == "linear":
            return z
        if self.output == "softmax":
            return _softmax(z)
        if self.output == "tanh":
            return self._center + self._half * np.tanh(z)
        if self.output == "sigmoid":
            return self.lower + 2.0 * self._half * _sigmoid(z)
        return np.maximum(z, 0.0)

    def _transform_backward(self, g, z, y):
        # vector-Jacobian product of the output transform
        if self.output == "linear":
            return g
        if self.output == "softmax":
            return y * (g - (g * y).sum(axis=-1, keepdims=True))
        if self.output == "tanh":
            t = (y - self._center) / self._half
            return g * self._half * (1.0 - t * t)
        if self.output == "sigmoid":
            s = (y - self.lower) / (2.0 * self._half)
            return g * 2.0 * self._half * s * (1.0 - s)
        return g * (z > 0.0)

    # -- reverse mode ------------------------------------------------------

    def backward(self, upstream, wrt="output"):
        """Gradient of ``sum(upstream * out)`` w.r.t. parameters and input.

        ``wrt='pre'`` means ``upstream`` is taken w.r.t. the pre-transform
        output (the logits of a softmax head). Gradients are summed over the
        batch. Returns ``(param_grad_flat, input_grad)``.
        """
        if self._cache is None:
            raise UsageError("backward called before forward")
        single, hs, z, y = self._cache
        G = np.asarray(upstream, dtype=np.float64)
        if single and G.ndim == 1:
            G = G[None, :]
        if G.shape != z.shape:
            raise ConfigurationError(f"upstream shape {G.shape} does not match output {z.shape}")
        dz = G if wrt == "pre" else self._transform_backward(G, z, y)
        grad = np.empty(self.params.size)
        dh = None
        for i in reversed(range(self.n_layers)):
            W = self.params[f"W{i}"]
            grad[self.params.slice(f"W{i}")] = (hs[i].T @ dz).ravel()
            grad[self.params.slice(f"b{i}")] = dz.sum(axis=0)
            dh = dz @ W.T
            if i > 0:
                h = hs[i]
                dz = dh * (1.0 - h * h) if self.activation[i - 1] == "tanh" else dh * (h > 0.0)
        return grad, (dh[0] if single else dh)

    # -- forward mode ------------------------------------------------------

    def jvp(self, dparams, dx=None):
        """Directional derivative of the cached forward pass.

        Returns ``(d_out, d_pre)`` for parameter tangent ``dparams`` (flat)
        and optional input tangent ``dx``.
        """
        if self._cache is None:
            raise UsageError("jvp called before forward")
        single, hs, z, y = self._cache
        tangent = ParamVector(self.params.layout, np.asarray(dparams, dtype=np.float64))
        if dx is not None:
            dx = np.asarray(dx, dtype=np.float64)
            dh = dx[None, :] if dx.ndim == 1 else dx
        else:
            dh = None
        dz = None
        for i in range(self.n_layers):
            W = self.params[f"W{i}"]
            dz = hs[i] @ tangent[f"W{i}"] + tangent[f"b{i}"]
            if dh is not None:
                dz = dz + dh @ W
            if i < self.n_layers - 1:
                h = hs[i + 1]
                dh = dz * (1.0 - h * h) if self.activation[i] == "tanh" else dz * (h > 0.0)
        if self.output == "softmax":
            dy = y * (dz - (dz * y).sum(axis=-1, keepdims=True))
        else:
            dy = self._transform_backward(dz, z, y)
        if single:
            return dy[0], dz[0]
        return dy, dz


# ---------------------------------------------------------------------------
# distributions

@dataclass
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.broadcast_to(np.asarray(self.log_std, dtype=np.float64), self.mean.shape)
        if not np.all(np.isfinite(self.log_std)):
            raise NumericError("log_std must be finite")

    @property
    def std(self):
        return np.exp(self.log_std)

    def logprob(self, a):
        return gaussian_logprob(self, a)

    def entropy(self):
        return gaussian_entropy(self.log_std)

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(self.mean.shape)


def gaussian_logprob(g, a):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != g.mean.shape[-1]:
        raise ConfigurationError(f"action dim {a.shape[-1]} != mean dim {g.mean.shape[-1]}")
    u = (a - g.mean) / np.exp(g.log_std)
    return np.sum(-0.5 * u * u - g.log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    log_std = np.asarray(log_std, dtype=np.float64)
    return np.sum(log_std + 0.5 * (LOG_2PI + 1.0), axis=-1)


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q):
    """KL(p || q) of diagonal Gaussians, summed over the last axis."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return np.sum(log_std_q - log_std_p + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5, axis=-1)


def categorical_entropy(probs, logp=None):
    if logp is None:
        logp = np.log(np.clip(probs, 1e-300, None))
    return -np.sum(probs * logp, axis=-1)


def categorical_kl(p, logp, logq):
    """KL(p || q) from probabilities of p and log-probabilities of both."""
    return np.sum(p * (logp - logq), axis=-1)


def logprob_logit_grad(probs, index):
    """d log p[index] / d logits for a softmax head (rows of a batch)."""
    g = -probs.copy()
    g[np.arange(len(index)), index] += 1.0
    return g


def entropy_logit_grad(probs, logp):
    """d H / d logits for a softmax head, H = -sum p log p."""
    H = -np.sum(probs * logp, axis=-1, keepdims=True)
    return -probs * (logp + H)


def sample_index(probs, rng):
    """Inverse-CDF draw; consumes exactly one uniform from ``rng``."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


# ---------------------------------------------------------------------------
# optimizers

class LinearSchedule:
    """Linear interpolation from ``start`` to ``end`` over ``steps``, then flat."""

    def __init__(self, start, end, steps):
        self.start, self.end, self.steps = float(start), float(end), int(steps)

    def __call__(self, t):
        if self.steps <= 0 or t >= self.steps:
            return self.end
        frac = max(t, 0) / self.steps
        return self.start + frac * (self.end - self.start)


class Optimizer:
    """Gradient-descent optimizer over a flat parameter array.

    ``kind`` is ``sgd``, ``rmsprop-shared`` (one set of squared-gradient
    statistics for every worker that steps through this object) or ``adam``.
    With ``anneal_steps`` the learning rate decays linearly to exactly zero.
    """

    KINDS = ("sgd", "rmsprop-shared", "adam")

    def __init__(self, kind, size, learning_rate, anneal_steps=None, decay=0.99, eps=1e-6,
                 beta1=0.9, beta2=0.999, adam_eps=1e-8):
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        if learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.anneal_steps = anneal_steps
        self.decay, self.eps = decay, eps
        self.beta1, self.beta2, self.adam_eps = beta1, beta2, adam_eps
        self.sq = np.zeros(size)
        self.m = np.zeros(size) if kind == "adam" else None
        self.t = 0
        self._lock = threading.Lock()

    def lr_at(self, step):
        if not self.anneal_steps:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - step / self.anneal_steps)

    def step(self, params, grad, global_step=0):
        """Apply one descent step to ``params`` (ndarray or ParamVector) in place."""
        values = params.values if isinstance(params, ParamVector) else params
        lr = self.lr_at(global_step)
        with self._lock:
            if self.kind == "sgd":
                values -= lr * grad
            elif self.kind == "rmsprop-shared":
                self.sq *= self.decay
                self.sq += (1.0 - self.decay) * grad * grad
                values -= lr * grad / np.sqrt(self.sq + self.eps)
            else:
                self.t += 1
                self.m *= self.beta1
                self.m += (1.0 - self.beta1) * grad
                self.sq *= self.beta2
                self.sq += (1.0 - self.beta2) * grad * grad
                m_hat = self.m / (1.0 - self.beta1 ** self.t)
                v_hat = self.sq / (1.0 - self.beta2 ** self.t)
                values -= lr * m_hat / (np.sqrt(v_hat) + self.adam_eps)
        return lr


# ---------------------------------------------------------------------------
# gradient checking

def check_gradient(f, p, eps=1e-5):
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(values) -> (scalar, grad)``. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not (0.0 < eps <= 1e-2):
        raise ConfigurationError(f"eps must lie in (0, 1e-2], got {eps}")
    x = (p.values if isinstance(p, ParamVector) else np.asarray(p, dtype=np.float64)).copy()
    value, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite value or gradient")
    numeric = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x.copy())[0]
        x[i] = old - eps
        fm = f(x.copy())[0]
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
