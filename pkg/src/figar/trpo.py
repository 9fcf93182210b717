"""Trust-region policy updates for factored policies.

The surrogate multiplies the action-head importance objective by the
repetition-head one raised to ``beta_ar``; the trust region bounds
``KL_a + beta_kl * KL_x``. Steps follow the natural gradient (conjugate
gradient on exact Fisher-vector products) with backtracking.
"""
import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from figar.envs import execute_macro
from figar.errors import ConfigurationError, NumericError
from figar.numcore import categorical_kl, gaussian_kl, make_rng
from figar.policy import STOCHASTIC

log = logging.getLogger(__name__)


@dataclass
class TrpoConfig:
    beta_ar: float = 1.28
    beta_kl: float = 0.64
    delta: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.5
    max_backtracks: int = 10
    improvement_steps: int = 500
    k_min: int = 5
    k_max: int = 50
    gamma: float = 0.99
    surrogate: str = "product"  # or "additive"
    shared_trunk: bool = False
    eval_episodes: int = 100

    def __post_init__(self):
        if self.beta_ar <= 0 or self.beta_kl < 0:
            raise ConfigurationError("beta_ar must be > 0 and beta_kl >= 0")
        if self.delta <= 0:
            raise ConfigurationError("delta must be positive")
        if not (1 <= self.k_min <= self.k_max):
            raise ConfigurationError("need 1 <= k_min <= k_max")
        if self.surrogate not in ("product", "additive"):
            raise ConfigurationError(f"unknown surrogate form {self.surrogate!r}")


@dataclass
class SurrogateBatch:
    obs: np.ndarray
    actions: np.ndarray
    rep_idx: np.ndarray
    q: np.ndarray
    old_logp_a: np.ndarray
    old_logp_x: np.ndarray
    old_action_probs: Optional[np.ndarray]
    old_action_logp: Optional[np.ndarray]
    old_mean: Optional[np.ndarray]
    old_log_std: Optional[np.ndarray]
    old_rep_probs: np.ndarray
    old_rep_logp: np.ndarray
    episode_returns: list = field(default_factory=list)
    repetitions: list = field(default_factory=list)

    def __len__(self):
        return len(self.q)

    @property
    def mean_return(self):
        return float(np.mean(self.episode_returns))


def freeze_batch(policy, obs, actions, rep_idx, q, episode_returns=(), repetitions=()):
    """Snapshot the current head distributions as the ``old`` policy of a batch."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    out = policy.forward(obs)
    rows = np.arange(len(obs))
    rep_idx = np.asarray(rep_idx, dtype=int)
    actions = np.asarray(actions, dtype=int if policy.discrete else np.float64)
    if not policy.discrete:
        actions = actions.reshape(len(obs), -1)
    return SurrogateBatch(
        obs=obs, actions=actions, rep_idx=rep_idx, q=np.asarray(q, dtype=np.float64),
        old_logp_a=policy.action_logprob(out, actions),
        old_logp_x=out.rep_logp[rows, rep_idx],
        old_action_probs=out.action_probs, old_action_logp=out.action_logp,
        old_mean=out.mean, old_log_std=out.log_std,
        old_rep_probs=out.rep_probs, old_rep_logp=out.rep_logp,
        episode_returns=list(episode_returns), repetitions=list(repetitions),
    )


def surrogate_form(policy, batch, config_form="product"):
    """Which surrogate applies to ``batch``: ``single``, ``product`` or ``additive``.

    A singleton repetition set makes the repetition factor a positive
    constant, which is dropped. The product form needs positive factors at
    the old parameters, where both factors equal ``mean(q)``.
    """
    if policy.W.singleton:
        return "single"
    if config_form == "additive":
        return "additive"
    if np.mean(batch.q) <= 0.0:
        return "additive"
    return "product"


def factored_surrogate(policy, batch, beta_ar=1.28, form=None):
    """``L_a * L_x ** beta_ar`` (or the additive / single-factor fallback) and its gradient.

    ``L_a = mean(pi_a / pi_a_old * q)`` and ``L_x = mean(pi_x / pi_x_old * q)``.
    Returns ``(value, flat_grad)``; the value is ``-inf`` where the product
    form is undefined (``L_x < 0``).
    """
    if form is None:
        form = surrogate_form(policy, batch)
    out = policy.forward(batch.obs)
    N = len(batch)
    rows = np.arange(N)
    ra = np.exp(policy.action_logprob(out, batch.actions) - batch.old_logp_a)
    L_a = np.mean(ra * batch.q)
    g_a, g_ls = policy.action_logprob_grad(out, batch.actions)
    wa = (ra * batch.q / N)[:, None]
    if form == "single":
        grad = policy.backward(wa * g_a, np.zeros_like(out.rep_probs),
                               None if g_ls is None else (wa * g_ls).sum(axis=0))
        return float(L_a), grad
    rx = np.exp(out.rep_logp[rows, batch.rep_idx] - batch.old_logp_x)
    L_x = np.mean(rx * batch.q)
    g_x = -out.rep_probs.copy()
    g_x[rows, batch.rep_idx] += 1.0
    wx = (rx * batch.q / N)[:, None]
    if form == "additive":
        value, ca, cx = L_a + beta_ar * L_x, 1.0, beta_ar
    else:
        if L_x < 0.0:
            return float("-inf"), np.zeros(policy.params.size)
        value = L_a * L_x ** beta_ar
        ca = L_x ** beta_ar
        cx = beta_ar * L_a * L_x ** (beta_ar - 1.0) if L_a != 0.0 else 0.0
    grad = policy.backward(ca * wa * g_a, cx * wx * g_x,
                           None if g_ls is None else ca * (wa * g_ls).sum(axis=0))
    return float(value), grad


def _old_outputs(policy, old_policy, obs):
    o = old_policy.forward(obs)
    return dict(probs=o.action_probs, logp=o.action_logp, mean=o.mean, log_std=o.log_std,
                rep_probs=o.rep_probs, rep_logp=o.rep_logp)


def combined_kl(policy, old, obs, beta_kl=0.64, with_grad=True):
    """``mean KL(pi_a_old || pi_a) + beta_kl * mean KL(pi_x_old || pi_x)``.

    ``old`` is either a policy or a :class:`SurrogateBatch`. Returns
    ``(value, flat_grad or None, max_over_states)``.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if isinstance(old, SurrogateBatch):
        o = dict(probs=old.old_action_probs, logp=old.old_action_logp, mean=old.old_mean,
                 log_std=old.old_log_std, rep_probs=old.old_rep_probs, rep_logp=old.old_rep_logp)
    else:
        o = _old_outputs(policy, old, obs)
    out = policy.forward(obs)
    N = len(obs)
    if policy.discrete:
        kl_a = categorical_kl(o["probs"], o["logp"], out.action_logp)
    else:
        kl_a = gaussian_kl(o["mean"], o["log_std"], out.mean, out.log_std)
    kl_x = categorical_kl(o["rep_probs"], o["rep_logp"], out.rep_logp)
    per_state = kl_a + beta_kl * kl_x
    value = float(np.mean(kl_a) + beta_kl * np.mean(kl_x))
    if not with_grad:
        return value, None, float(per_state.max())
    g_ls = None
    if policy.discrete:
        g_a = (out.action_probs - o["probs"]) / N
    else:
        var_new = np.exp(2.0 * out.log_std)
        var_old = np.exp(2.0 * o["log_std"])
        diff = out.mean - o["mean"]
        g_a = diff / var_new / N
        g_ls = np.sum(1.0 - (var_old + diff * diff) / var_new, axis=0) / N
    g_x = beta_kl * (out.rep_probs - o["rep_probs"]) / N
    return value, policy.backward(g_a, g_x, g_ls), float(per_state.max())


def fisher_vector_product(policy, obs, v, beta_kl):
    """Exact Hessian of the combined KL at the current parameters times ``v``.

    Uses forward-mode tangents through the networks, the closed-form KL
    Hessian in distribution space, then one backward pass.
    """
    out = policy.forward(obs)
    N = len(obs)
    d_action, d_rep, d_log_std = policy.jvp(v)
    g_ls = None
    if policy.discrete:
        p = out.action_probs
        g_a = p * (d_action - np.sum(p * d_action, axis=1, keepdims=True)) / N
    else:
        g_a = d_action / np.exp(2.0 * out.log_std) / N
        g_ls = 2.0 * d_log_std
    px = out.rep_probs
    g_x = beta_kl * px * (d_rep - np.sum(px * d_rep, axis=1, keepdims=True)) / N
    return policy.backward(g_a, g_x, g_ls)


def conjugate_gradient(Avp, b, iters=10, residual_tol=1e-10):
    """Approximately solve ``A x = b`` for symmetric positive-definite ``A``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < residual_tol:
            break
        Ap = Avp(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class TrustRegionStep:
    search_direction: np.ndarray
    full_step_size: float
    accepted_fraction: float
    kl_after: float
    surrogate_before: float
    surrogate_after: float
    accepted: bool
    form: str = "product"
    max_kl: float = 0.0
    backtracks: int = 0


def active_slice(policy):
    """Parameters the update may move; a singleton repetition head is frozen."""
    if policy.W.singleton:
        return policy.action_param_slice()
    return slice(0, policy.params.size)


def trust_region_update(policy, batch, config):
    """One natural-gradient step within the combined-KL trust region.

    The step is scaled to the ``delta`` boundary of the quadratic KL model,
    then halved until the measured combined KL is within ``delta`` and the
    surrogate strictly improves. If no fraction qualifies the step is
    rejected and the parameters are left unchanged.
    """
    form = surrogate_form(policy, batch, config.surrogate)
    if form == "additive" and config.surrogate == "product":
        log.debug("non-positive surrogate factor at old parameters; using the additive form")
    theta_old = policy.get_flat()
    act = active_slice(policy)
    s_before, grad = factored_surrogate(policy, batch, config.beta_ar, form)
    if not (np.isfinite(s_before) and np.all(np.isfinite(grad))):
        raise NumericError("non-finite surrogate gradient")
    g = grad[act]
    if not np.any(g):
        return TrustRegionStep(np.zeros_like(g), 0.0, 0.0, 0.0, s_before, s_before, False, form)

    def fvp(v):
        full = np.zeros(policy.params.size)
        full[act] = v
        return fisher_vector_product(policy, batch.obs, full, config.beta_kl)[act] + config.cg_damping * v

    direction = conjugate_gradient(fvp, g, config.cg_iters)
    shs = direction @ fvp(direction)
    if not np.isfinite(shs) or shs <= 0.0:
        return TrustRegionStep(direction, 0.0, 0.0, 0.0, s_before, s_before, False, form)
    scale = np.sqrt(2.0 * config.delta / shs)
    full_step = scale * direction
    frac = 1.0
    for k in range(config.max_backtracks):
        theta = theta_old.copy()
        theta[act] += frac * full_step
        policy.set_flat(theta)
        s_after, _ = factored_surrogate(policy, batch, config.beta_ar, form)
        kl, _, max_kl = combined_kl(policy, batch, batch.obs, config.beta_kl, with_grad=False)
        if kl <= config.delta and s_after > s_before:
            return TrustRegionStep(direction, float(scale), frac, kl, s_before, s_after, True, form, max_kl, k)
        frac *= config.backtrack_ratio
    policy.set_flat(theta_old)
    return TrustRegionStep(direction, float(scale), 0.0, 0.0, s_before, s_before, False, form, 0.0,
                           config.max_backtracks)


class KSchedule:
    """Episodes per batch, interpolated linearly over the observed return range.

    The best return seen so far maps to ``k_min``, the worst to ``k_max``.
    """

    def __init__(self, k_min=5, k_max=50):
        self.k_min, self.k_max = int(k_min), int(k_max)
        self.lo = self.hi = None

    def observe(self, mean_return):
        self.lo = mean_return if self.lo is None else min(self.lo, mean_return)
        self.hi = mean_return if self.hi is None else max(self.hi, mean_return)

    def k_for(self, mean_return=None):
        if mean_return is None or self.lo is None or self.hi <= self.lo:
            return self.k_max
        frac = (min(max(mean_return, self.lo), self.hi) - self.lo) / (self.hi - self.lo)
        return int(round(self.k_max - frac * (self.k_max - self.k_min)))


def rollout_episode(policy, env, rng, gamma, mode=STOCHASTIC):
    """One episode at decision granularity. Returns per-decision lists and the undiscounted return."""
    obs = env.reset()
    states, actions, reps, rewards, elapsed = [], [], [], [], []
    ret = 0.0
    while True:
        d = policy.decide(obs, mode, rng)
        a = d.action
        if not policy.discrete:
            a_exec = np.clip(a, policy.action_low, policy.action_high)
        else:
            a_exec = a
        tr = execute_macro(env, a_exec, d.repetition, gamma)
        states.append(obs)
        actions.append(a)
        reps.append(d.rep_index)
        rewards.append(tr.macro_reward)
        elapsed.append(tr.elapsed)
        ret += sum(tr.primitive_rewards)
        obs = tr.next_state
        if tr.terminal:
            return states, actions, reps, rewards, elapsed, ret


def returns_to_go(rewards, elapsed, gamma):
    """Empirical SMDP return from each decision of a finished episode."""
    q = np.empty(len(rewards))
    G = 0.0
    for k in reversed(range(len(rewards))):
        G = rewards[k] + gamma ** elapsed[k] * G
        q[k] = G
    return q


def gather_batch(policy, env, K, gamma, rng):
    """Roll out ``K`` episodes with the current policy and freeze them as a surrogate batch."""
    obs, acts, reps, qs, rets, xs = [], [], [], [], [], []
    for _ in range(int(K)):
        s, a, r_idx, rew, el, ret = rollout_episode(policy, env, rng, gamma)
        obs += s
        acts += a
        reps += r_idx
        qs.append(returns_to_go(rew, el, gamma))
        rets.append(ret)
        xs += [policy.W[i] for i in r_idx]
    actions = np.array(acts) if policy.discrete else np.stack(acts)
    return freeze_batch(policy, np.stack(obs), actions, reps, np.concatenate(qs), rets, xs)


def track_best_policy(history):
    """Snapshot with the highest training-phase average return (first on ties)."""
    if not history:
        raise ConfigurationError("no improvement steps recorded")
    best = max(range(len(history)), key=lambda i: (history[i][0], -i))
    return history[best][1]


@dataclass
class TrpoLog:
    rows: List[dict] = field(default_factory=list)
    history: List[tuple] = field(default_factory=list)
    steps: List[TrustRegionStep] = field(default_factory=list)

    COLUMNS = ("iteration", "episodes", "mean_episode_return", "mean_repetition", "surrogate_before",
               "surrogate_after", "kl_after", "accepted", "form")

    @property
    def rejection_rate(self):
        return 1.0 - np.mean([s.accepted for s in self.steps]) if self.steps else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in self.COLUMNS)])


def train(config, env_factory, policy, seed=0, steps=None):
    """Run ``steps`` (default ``config.improvement_steps``) gather/update iterations.

    Leaves the policy at its final parameters; use
    ``track_best_policy(log.history)`` for the best training-phase snapshot.
    """
    env = env_factory(int(make_rng(seed, "env", 0).integers(2**31)))
    rng = make_rng(seed, "worker", 0)
    schedule = KSchedule(config.k_min, config.k_max)
    out = TrpoLog()
    last = None
    for it in range(config.improvement_steps if steps is None else steps):
        K = schedule.k_for(last)
        batch = gather_batch(policy, env, K, config.gamma, rng)
        last = batch.mean_return
        schedule.observe(last)
        out.history.append((last, policy.get_flat()))
        step = trust_region_update(policy, batch, config)
        out.steps.append(step)
        out.rows.append(dict(iteration=it + 1, episodes=K, mean_episode_return=last,
                             mean_repetition=float(np.mean(batch.repetitions)),
                             surrogate_before=step.surrogate_before, surrogate_after=step.surrogate_after,
                             kl_after=step.kl_after, accepted=int(step.accepted), form=step.form))
    return out
