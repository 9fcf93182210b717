"""Factored action / repetition policies and repetition sets."""
import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from figar.errors import ConfigurationError, NumericError
from figar.numcore import (
    LOG_2PI,
    Mlp,
    ParamVector,
    categorical_entropy,
    gaussian_entropy,
    log_softmax,
    make_rng,
    sample_index,
)


@dataclass(frozen=True)
class RepetitionSet:
    values: tuple
    name: str = "explicit"

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if not vals:
            raise ConfigurationError("repetition set is empty")
        if any(v < 1 for v in vals):
            raise ConfigurationError(f"repetitions must be >= 1: {vals}")
        if len(set(vals)) != len(vals):
            raise ConfigurationError(f"duplicate repetitions: {vals}")
        if list(vals) != sorted(vals):
            raise ConfigurationError(f"repetitions must be strictly increasing: {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __contains__(self, x):
        return int(x) in self.values

    def __getitem__(self, i):
        return self.values[i]

    def index(self, x):
        try:
            return self.values.index(int(x))
        except ValueError:
            raise ConfigurationError(f"repetition {x} not in {self.name}") from None

    @property
    def max(self):
        return self.values[-1]

    @property
    def singleton(self):
        return len(self.values) == 1


def _primes_below(n):
    return [p for p in range(2, n) if all(p % d for d in range(2, int(math.isqrt(p)) + 1))]


def make_repetition_set(variant, master_seed=0):
    """Build a named repetition set.

    Accepted names: ``figar-<k>`` (``1..k``), ``figar-<k>-<m>`` (``k`` values
    drawn without replacement from ``1..m`` with ``master_seed``),
    ``figar-p`` (primes below 50), ``singleton-<c>`` / ``singleton(<c>)``,
    ``baseline`` (``{1}``), an ``explicit:`` comma list, or any sequence of ints.
    """
    if isinstance(variant, RepetitionSet):
        return variant
    if not isinstance(variant, str):
        vals = [int(v) for v in variant]
        if len(set(vals)) != len(vals):
            raise ConfigurationError(f"duplicate repetitions: {vals}")
        return RepetitionSet(tuple(sorted(vals)), "explicit")
    name = variant.strip().lower()
    if name == "figar-p":
        return RepetitionSet(tuple(_primes_below(50)), name)
    if name == "baseline":
        return RepetitionSet((1,), name)
    m = re.fullmatch(r"figar-(\d+)", name)
    if m:
        k = int(m.group(1))
        if k < 1:
            raise ConfigurationError(f"invalid variant {variant!r}")
        return RepetitionSet(tuple(range(1, k + 1)), name)
    m = re.fullmatch(r"figar-(\d+)-(\d+)", name)
    if m:
        k, hi = int(m.group(1)), int(m.group(2))
        if not (1 <= k <= hi):
            raise ConfigurationError(f"invalid variant {variant!r}")
        rng = np.random.default_rng(int(master_seed))
        drawn = rng.choice(np.arange(1, hi + 1), size=k, replace=False)
        return RepetitionSet(tuple(sorted(int(v) for v in drawn)), name)
    m = re.fullmatch(r"singleton[-(](\d+)\)?", name)
    if m:
        return RepetitionSet((int(m.group(1)),), name)
    if name.startswith("explicit:") or re.fullmatch(r"[\d,\s]+", name):
        body = name.split(":", 1)[-1]
        vals = [int(v) for v in body.split(",") if v.strip()]
        if len(set(vals)) != len(vals):
            raise ConfigurationError(f"duplicate repetitions: {vals}")
        return RepetitionSet(tuple(sorted(vals)), "explicit")
    raise ConfigurationError(f"unknown repetition set variant {variant!r}")


@dataclass(frozen=True)
class SamplingMode:
    kind: str = "stochastic"
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in ("stochastic", "eps_greedy", "greedy"):
            raise ConfigurationError(f"unknown sampling mode {self.kind!r}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigurationError("epsilon must lie in [0, 1]")

    @classmethod
    def eps_greedy(cls, epsilon):
        return cls("eps_greedy", float(epsilon))


STOCHASTIC = SamplingMode("stochastic")
GREEDY = SamplingMode("greedy")


@dataclass
class Decision:
    action: object
    repetition: int
    rep_index: int
    logprob_a: float
    logprob_x: float
    action_probs: Optional[np.ndarray] = None
    repetition_probs: Optional[np.ndarray] = None


@dataclass
class HeadOutputs:
    rep_probs: np.ndarray
    rep_logp: np.ndarray
    action_probs: Optional[np.ndarray] = None
    action_logp: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    log_std: Optional[np.ndarray] = None


class FactoredPolicy:
    """Action head plus repetition head over ``W``.

    Discrete action heads are softmax networks; continuous ones output a
    bounded-tanh mean with a state-independent ``log_std`` vector. With
    ``shared_trunk`` (hidden sizes) both heads read the trunk's last hidden
    layer and are single linear layers; otherwise the heads are disjoint
    networks with ``hidden`` layers each.

    Parameter layout is ``trunk.* | action.* | log_std | rep.*`` in one flat
    :class:`ParamVector`.
    """

    def __init__(self, obs_dim, W, n_actions=None, action_bounds=None, hidden=(32,),
                 activation="tanh", shared_trunk=None, seed=0, init_log_std=0.0,
                 final_scale=0.01, init=True):
        if (n_actions is None) == (action_bounds is None):
            raise ConfigurationError("give exactly one of n_actions / action_bounds")
        self.W = make_repetition_set(W)
        self.obs_dim = int(obs_dim)
        self.discrete = n_actions is not None
        self._config = dict(obs_dim=obs_dim, W=self.W, n_actions=n_actions, action_bounds=action_bounds,
                            hidden=tuple(hidden), activation=activation,
                            shared_trunk=None if shared_trunk is None else tuple(shared_trunk),
                            seed=seed, init_log_std=init_log_std, final_scale=final_scale)
        if self.discrete:
            self.action_dim = int(n_actions)
            if self.action_dim < 2:
                raise ConfigurationError("need at least two discrete actions")
        else:
            lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in action_bounds)
            self.action_dim = lo.size
            self.action_low, self.action_high = lo, hi

        if shared_trunk is not None:
            trunk_sizes = [self.obs_dim, *shared_trunk]
            feat = trunk_sizes[-1]
            action_sizes = [feat, self.action_dim]
            rep_sizes = [feat, len(self.W)]
        else:
            trunk_sizes = None
            action_sizes = [self.obs_dim, *hidden, self.action_dim]
            rep_sizes = [self.obs_dim, *hidden, len(self.W)]

        layout = []
        if trunk_sizes:
            layout += [("trunk." + n, s) for n, s in Mlp.layout(trunk_sizes)]
        layout += [("action." + n, s) for n, s in Mlp.layout(action_sizes)]
        if not self.discrete:
            layout.append(("log_std", (self.action_dim,)))
        layout += [("rep." + n, s) for n, s in Mlp.layout(rep_sizes)]
        self.params = ParamVector(layout)

        self.trunk = None
        if trunk_sizes:
            # trunk output uses the hidden nonlinearity itself
            self.trunk = Mlp(trunk_sizes, activation, output=activation, params=self.params.sub("trunk."))
        if self.discrete:
            self.action_head = Mlp(action_sizes, activation, "softmax", params=self.params.sub("action."))
        else:
            self.action_head = Mlp(action_sizes, activation, "tanh", params=self.params.sub("action."),
                                   bounds=(self.action_low, self.action_high))
        self.rep_head = Mlp(rep_sizes, activation, "softmax", params=self.params.sub("rep."))
        self.trunk_slice = self.params.prefix_slice("trunk.")
        self.action_slice = self.params.prefix_slice("action.")
        self.log_std_slice = None if self.discrete else self.params.slice("log_std")
        self.rep_slice = self.params.prefix_slice("rep.")
        if init:
            if self.trunk is not None:
                self.trunk.init_params(make_rng(seed, "trunk"))
            self.action_head.init_params(make_rng(seed, "action"), final_scale)
            self.rep_head.init_params(make_rng(seed, "rep"), final_scale)
            if not self.discrete:
                self.params["log_std"][...] = init_log_std

    # -- bookkeeping -------------------------------------------------------

    def clone(self):
        other = FactoredPolicy(**self._config, init=False)
        other.params.values[:] = self.params.values
        return other

    def get_flat(self):
        return self.params.values.copy()

    def set_flat(self, values):
        self.params.values[:] = values

    @property
    def log_std(self):
        return self.params["log_std"]

    def action_param_slice(self):
        """Slice covering everything except the repetition head."""
        return slice(0, self.rep_slice.start)

    # -- evaluation --------------------------------------------------------

    def forward(self, obs):
        """Evaluate both heads on a batch ``(B, obs_dim)``; caches for backward."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None, :]
        if obs.shape[1] != self.obs_dim:
            raise ConfigurationError(f"observation dim {obs.shape[1]} != {self.obs_dim}")
        feat = self.trunk.forward(obs) if self.trunk is not None else obs
        rep_probs, rep_logits = self.rep_head.forward_full(feat)
        out = HeadOutputs(rep_probs=rep_probs, rep_logp=log_softmax(rep_logits))
        if self.discrete:
            probs, logits = self.action_head.forward_full(feat)
            out.action_probs, out.action_logp = probs, log_softmax(logits)
        else:
            out.mean = self.action_head.forward(feat)
            out.log_std = self.params["log_std"].copy()
        return out

    def backward(self, g_action, g_rep, g_log_std=None):
        """Flat parameter gradient from head-level gradients of the last forward.

        ``g_action`` is w.r.t. action logits (discrete) or the mean
        (continuous); ``g_rep`` is w.r.t. repetition logits.
        """
        grad = np.zeros(self.params.size)
        ga, dfeat_a = self.action_head.backward(g_action, wrt="pre" if self.discrete else "output")
        gx, dfeat_x = self.rep_head.backward(g_rep, wrt="pre")
        grad[self.action_slice] = ga
        grad[self.rep_slice] = gx
        if not self.discrete and g_log_std is not None:
            grad[self.log_std_slice] = g_log_std
        if self.trunk is not None:
            gt, _ = self.trunk.backward(dfeat_a + dfeat_x)
            grad[self.trunk_slice] = gt
        return grad

    def jvp(self, tangent):
        """Head-level tangents ``(d_action, d_rep_logits, d_log_std)`` of the last forward."""
        tangent = np.asarray(tangent, dtype=np.float64)
        dfeat = None
        if self.trunk is not None:
            dfeat, _ = self.trunk.jvp(tangent[self.trunk_slice])
        d_out, d_pre = self.action_head.jvp(tangent[self.action_slice], dfeat)
        d_action = d_pre if self.discrete else d_out
        _, d_rep = self.rep_head.jvp(tangent[self.rep_slice], dfeat)
        d_log_std = None if self.discrete else tangent[self.log_std_slice]
        return d_action, d_rep, d_log_std

    def action_logprob(self, out, actions):
        if self.discrete:
            return out.action_logp[np.arange(len(actions)), np.asarray(actions, dtype=int)]
        a = np.asarray(actions, dtype=np.float64).reshape(len(out.mean), -1)
        u = (a - out.mean) / np.exp(out.log_std)
        return np.sum(-0.5 * u * u - out.log_std - 0.5 * LOG_2PI, axis=-1)

    def action_logprob_grad(self, out, actions):
        """Per-row gradient of the action log-prob: ``(g_action, g_log_std_rows)``."""
        if self.discrete:
            g = -out.action_probs.copy()
            g[np.arange(len(actions)), np.asarray(actions, dtype=int)] += 1.0
            return g, None
        a = np.asarray(actions, dtype=np.float64).reshape(len(out.mean), -1)
        var = np.exp(2.0 * out.log_std)
        diff = a - out.mean
        return diff / var, diff * diff / var - 1.0

    def action_entropy(self, out):
        if self.discrete:
            return categorical_entropy(out.action_probs, out.action_logp)
        return np.full(len(out.mean), gaussian_entropy(out.log_std))

    # -- operations --------------------------------------------------------

    def decide(self, obs, mode=STOCHASTIC, rng=None):
        """Pick ``(action, repetition)``; log-probs are under the unmodified heads.

        RNG use per call: action coin (eps-greedy only), action draw,
        repetition coin, repetition draw. A singleton ``W`` draws nothing
        for the repetition.
        """
        out = self.forward(obs)
        if self.discrete:
            probs = out.action_probs[0]
            if not np.all(np.isfinite(probs)):
                raise NumericError("non-finite action head output")
        else:
            mean = out.mean[0]
            if not np.all(np.isfinite(mean)):
                raise NumericError("non-finite action head output")
        rep_probs = out.rep_probs[0]
        if not np.all(np.isfinite(rep_probs)):
            raise NumericError("non-finite repetition head output")

        if self._explore(mode, rng):
            if self.discrete:
                a = sample_index(probs, rng)
            else:
                a = mean + np.exp(out.log_std) * rng.standard_normal(self.action_dim)
        else:
            a = int(np.argmax(probs)) if self.discrete else mean.copy()

        if self.W.singleton:
            xi = 0
        elif self._explore(mode, rng):
            xi = sample_index(rep_probs, rng)
        else:
            xi = int(np.argmax(rep_probs))

        if self.discrete:
            lp_a = float(out.action_logp[0, a])
            snapshot = probs.copy()
        else:
            lp_a = float(self.action_logprob(out, a[None, :])[0])
            snapshot = mean.copy()
        return Decision(action=a, repetition=self.W[xi], rep_index=xi, logprob_a=lp_a,
                        logprob_x=float(out.rep_logp[0, xi]), action_probs=snapshot,
                        repetition_probs=rep_probs.copy())

    @staticmethod
    def _explore(mode, rng):
        if mode.kind == "stochastic":
            return True
        if mode.kind == "greedy":
            return False
        return rng.random() < mode.epsilon

    def joint_logprob(self, obs, a, x):
        """``(log pi_a(a|s), log pi_x(x|s))`` for one observation."""
        xi = self.W.index(x)
        out = self.forward(obs)
        lp_a = self.action_logprob(out, [a] if self.discrete else np.atleast_1d(a)[None, :])[0]
        return float(lp_a), float(out.rep_logp[0, xi])

    def joint_logprob_grad(self, obs, actions, reps, weights=None):
        """Value and flat gradient of ``sum_j w_j (log pi_a + log pi_x)`` over a batch."""
        obs = np.atleast_2d(obs)
        rep_idx = np.array([self.W.index(x) for x in reps])
        w = np.ones(len(obs)) if weights is None else np.asarray(weights, dtype=np.float64)
        out = self.forward(obs)
        lp = self.action_logprob(out, actions) + out.rep_logp[np.arange(len(obs)), rep_idx]
        g_a, g_ls = self.action_logprob_grad(out, actions)
        g_x = -out.rep_probs.copy()
        g_x[np.arange(len(obs)), rep_idx] += 1.0
        grad = self.backward(g_a * w[:, None], g_x * w[:, None],
                             None if g_ls is None else (g_ls * w[:, None]).sum(axis=0))
        return float(np.dot(w, lp)), grad

    def entropy(self, obs):
        """``(H_a, H_x)`` for one observation."""
        out = self.forward(obs)
        return float(self.action_entropy(out)[0]), float(categorical_entropy(out.rep_probs, out.rep_logp)[0])


def repetition_histogram(decisions: Sequence, bin_width=3, w_max=None):
    """Fraction of decisions per repetition bin ``[1-3], [4-6], ...``.

    Accepts Decision objects or plain repetition counts. Returns
    ``(labels, fractions)``; fractions sum to 1 before any rounding.
    """
    xs = [d.repetition if isinstance(d, Decision) else int(d) for d in decisions]
    if not xs:
        raise ConfigurationError("cannot histogram an empty decision list")
    if w_max is None:
        w_max = max(xs)
    if max(xs) > w_max or min(xs) < 1:
        raise ConfigurationError(f"repetitions must lie in 1..{w_max}")
    n_bins = -(-int(w_max) // bin_width)
    counts = np.zeros(n_bins)
    for x in xs:
        counts[(x - 1) // bin_width] += 1
    labels = [f"{i * bin_width + 1}-{(i + 1) * bin_width}" for i in range(n_bins)]
    return labels, counts / len(xs)
