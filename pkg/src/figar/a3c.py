"""Actor-critic with a factored (action, repetition) policy.

Returns are built over ``n`` decision steps; each macro's reward is already
discounted inside the macro, and the discount between macros is
``gamma ** elapsed`` so targets equal the primitive-step discounted return.
"""
import csv
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from figar.envs import execute_macro
from figar.errors import ConfigurationError, NumericError
from figar.numcore import (
    Mlp,
    Optimizer,
    categorical_entropy,
    entropy_logit_grad,
    logprob_logit_grad,
    make_rng,
)
from figar.policy import STOCHASTIC


@dataclass
class A3cConfig:
    n: int = 20
    entropy_beta: float = 0.02
    lr: float = 1e-3
    total_decision_steps: int = 200_000
    warmup_fraction: float = 0.2
    warmup_fixed_repetition: Optional[int] = None  # None: 1 if 1 in W else min(W)
    num_workers: int = 1
    gamma: float = 0.99
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-6
    log_interval: int = 1000
    literal_exponents: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if self.num_workers < 1:
            raise ConfigurationError("num_workers must be >= 1")
        if self.total_decision_steps < 1:
            raise ConfigurationError("total_decision_steps must be positive")


@dataclass
class RolloutSegment:
    transitions: list
    bootstrap_value: float
    n: int

    def __post_init__(self):
        if not self.transitions:
            raise ConfigurationError("segment has no transitions")
        if self.transitions[-1].terminal and self.bootstrap_value != 0.0:
            raise ConfigurationError("terminal segments bootstrap from 0")


def smdp_return_targets(segment, gamma, literal=False):
    """Value targets for every decision in ``segment``.

    Default: ``G_j = r_j + gamma**elapsed_j * G_{j+1}`` with
    ``G_n = bootstrap``, i.e. the exponent of ``r_k`` is the number of
    primitive steps between ``s_j`` and ``s_k``.

    ``literal=True`` instead accumulates exponents starting from the *next*
    macro's repetition (the first macro's duration is skipped); the
    repetition at the bootstrap state is not yet chosen and counts as 0.
    Kept for comparison only.
    """
    trs = segment.transitions
    L = len(trs)
    if not literal:
        out = np.empty(L)
        G = segment.bootstrap_value
        for k in reversed(range(L)):
            G = trs[k].macro_reward + gamma ** trs[k].elapsed * G
            out[k] = G
        return out
    out = np.empty(L)
    for j in range(L):
        y, total = 0, 0.0
        for k in range(j, L):
            if k > j:
                y += trs[k].elapsed
            total += gamma ** y * trs[k].macro_reward
        out[j] = total + gamma ** y * segment.bootstrap_value
    return out


def _segment_arrays(policy, segment):
    obs = np.stack([tr.state for tr in segment.transitions])
    actions = np.array([tr.action for tr in segment.transitions])
    rep_idx = np.array([policy.W.index(tr.repetition) for tr in segment.transitions])
    return obs, actions, rep_idx


def joint_actor_loss(policy, segment, values, targets, beta=0.02, include_repetition=True):
    """``-sum_j (log pi_a + log pi_x) * A_j - beta * sum_j (H_a + H_x)``.

    ``A_j = targets_j - values_j`` is a constant. With
    ``include_repetition=False`` (warm-up stage) the repetition terms are
    dropped and the repetition head receives no gradient.

    Returns ``(loss, flat_grad, (mean H_a, mean H_x))``.
    """
    if not policy.discrete:
        raise ConfigurationError("the actor-critic trainer expects a discrete action head")
    obs, actions, rep_idx = _segment_arrays(policy, segment)
    adv = np.asarray(targets, dtype=np.float64) - np.asarray(values, dtype=np.float64)
    out = policy.forward(obs)
    rows = np.arange(len(obs))
    lp_a = out.action_logp[rows, actions]
    H_a = categorical_entropy(out.action_probs, out.action_logp)
    g_a = -(adv[:, None] * logprob_logit_grad(out.action_probs, actions)) \
        - beta * entropy_logit_grad(out.action_probs, out.action_logp)
    lp_x = out.rep_logp[rows, rep_idx]
    H_x = categorical_entropy(out.rep_probs, out.rep_logp)
    if include_repetition:
        g_x = -(adv[:, None] * logprob_logit_grad(out.rep_probs, rep_idx)) \
            - beta * entropy_logit_grad(out.rep_probs, out.rep_logp)
        loss = -np.sum((lp_a + lp_x) * adv) - beta * np.sum(H_a + H_x)
    else:
        g_x = np.zeros_like(out.rep_probs)
        loss = -np.sum(lp_a * adv) - beta * np.sum(H_a)
    grad = policy.backward(g_a, g_x)
    return float(loss), grad, (float(H_a.mean()), float(H_x.mean()))


def critic_loss(value_fn, segment, targets):
    """Mean squared error ``mean_j (target_j - V(s_j))**2`` and its gradient."""
    obs = np.stack([tr.state for tr in segment.transitions])
    v = value_fn.forward(obs)[:, 0]
    diff = np.asarray(targets, dtype=np.float64) - v
    grad, _ = value_fn.backward((-2.0 * diff / len(diff))[:, None])
    return float(np.mean(diff * diff)), grad


def make_value_fn(obs_dim, hidden=(32,), seed=0, activation="tanh"):
    return Mlp([obs_dim, *hidden, 1], activation, "linear", rng=make_rng(seed, "critic"))


@dataclass
class TrainingLog:
    rows: List[dict] = field(default_factory=list)
    timing: List[tuple] = field(default_factory=list)
    episode_returns: List[float] = field(default_factory=list)
    decision_steps: int = 0
    primitive_steps: int = 0
    updates: int = 0

    COLUMNS = ("decision_step", "mean_episode_return", "mean_repetition", "entropy_a", "entropy_x")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in self.COLUMNS])

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("decision_step", "wallclock"))
            for step, wall in self.timing:
                w.writerow([step, f"{wall:.3f}"])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Shared:
    def __init__(self):
        self.step = 0
        self.lock = threading.Lock()
        self.window = dict(returns=[], reps=[], ent_a=[], ent_x=[])
        self.next_log = 0
        self.error = None


def train(config, env_factory, policy, value_fn, seed=0, on_update=None):
    """Train ``policy`` and ``value_fn`` in place; returns a :class:`TrainingLog`.

    ``env_factory(env_seed)`` builds one environment per worker. The budget
    counts decisions, not primitive steps. The first ``warmup_fraction`` of
    the budget executes ``warmup_fixed_repetition`` and gives the repetition
    head no gradient; after that all heads train jointly.

    Workers snapshot the shared parameters at the start of each segment and
    push their gradients through a shared RMSProp when it ends.
    ``on_update(policy, value_fn)`` is called after every update.
    """
    W = policy.W
    fixed_x = config.warmup_fixed_repetition
    if fixed_x is None:
        fixed_x = 1 if 1 in W else W[0]
    if fixed_x not in W:
        raise ConfigurationError(f"warmup repetition {fixed_x} not in W")
    total = config.total_decision_steps
    warmup_steps = int(round(config.warmup_fraction * total))
    opt_pi = Optimizer("rmsprop-shared", policy.params.size, config.lr, anneal_steps=total,
                       decay=config.rmsprop_decay, eps=config.rmsprop_eps)
    opt_v = Optimizer("rmsprop-shared", value_fn.params.size, config.lr, anneal_steps=total,
                      decay=config.rmsprop_decay, eps=config.rmsprop_eps)
    log = TrainingLog()
    shared = _Shared()
    shared.next_log = config.log_interval
    t0 = time.perf_counter()

    def worker(wid):
        try:
            _worker_loop(wid, config, env_factory, policy, value_fn, seed, opt_pi, opt_v,
                         shared, log, warmup_steps, fixed_x, t0, on_update)
        except BaseException as exc:  # surfaced to the caller below
            shared.error = exc

    if config.num_workers == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(i,)) for i in range(config.num_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if shared.error is not None:
        raise shared.error
    log.decision_steps = shared.step
    return log


def worker_seeds(seed, wid):
    env_seed = int(make_rng(seed, "env", wid).integers(2**31))
    return env_seed, make_rng(seed, "worker", wid)


def _worker_loop(wid, config, env_factory, policy, value_fn, seed, opt_pi, opt_v,
                 shared, log, warmup_steps, fixed_x, t0, on_update=None):
    env_seed, rng = worker_seeds(seed, wid)
    env = env_factory(env_seed)
    local_pi = policy.clone()
    local_v = Mlp(value_fn.layer_sizes, value_fn.activation, value_fn.output)
    gamma = config.gamma
    total = config.total_decision_steps
    obs = env.reset()
    ep_return = 0.0
    while True:
        with shared.lock:
            if shared.step >= total:
                return
            stage2 = shared.step >= warmup_steps
        local_pi.set_flat(policy.params.snapshot())
        local_v.params.values[:] = value_fn.params.snapshot()
        transitions = []
        reps = []
        for _ in range(config.n):
            # reserve the decision first so concurrent workers never overshoot the budget
            with shared.lock:
                if shared.step >= total:
                    break
                shared.step += 1
                step_now = shared.step
            d = local_pi.decide(obs, STOCHASTIC, rng)
            x = d.repetition if stage2 else fixed_x
            tr = execute_macro(env, d.action, x, gamma)
            transitions.append(tr)
            reps.append(x)
            ep_return += sum(tr.primitive_rewards)
            with shared.lock:
                log.primitive_steps += tr.elapsed
            obs = tr.next_state
            if tr.terminal or step_now >= total:
                break
        if not transitions:
            return
        last = transitions[-1]
        bootstrap = 0.0 if last.terminal else float(local_v.forward(last.next_state)[0])
        segment = RolloutSegment(transitions, bootstrap, config.n)
        targets = smdp_return_targets(segment, gamma, config.literal_exponents)
        obs_batch = np.stack([tr.state for tr in transitions])
        values = local_v.forward(obs_batch)[:, 0]
        _, g_pi, (h_a, h_x) = joint_actor_loss(local_pi, segment, values, targets,
                                               config.entropy_beta, include_repetition=stage2)
        _, g_v = critic_loss(local_v, segment, targets)
        if not (np.all(np.isfinite(g_pi)) and np.all(np.isfinite(g_v))):
            raise NumericError("non-finite gradient during actor-critic training")
        opt_pi.step(policy.params, g_pi, step_now)
        opt_v.step(value_fn.params, g_v, step_now)
        with shared.lock:
            log.updates += 1
            if on_update is not None:
                on_update(policy, value_fn)
            win = shared.window
            win["reps"].extend(reps)
            win["ent_a"].append(h_a)
            win["ent_x"].append(h_x)
            if last.terminal:
                win["returns"].append(ep_return)
                log.episode_returns.append(ep_return)
            if shared.step >= shared.next_log or shared.step >= total:
                log.rows.append(dict(
                    decision_step=shared.step,
                    mean_episode_return=float(np.mean(win["returns"])) if win["returns"] else float("nan"),
                    mean_repetition=float(np.mean(win["reps"])),
                    entropy_a=float(np.mean(win["ent_a"])),
                    entropy_x=float(np.mean(win["ent_x"])),
                ))
                log.timing.append((shared.step, time.perf_counter() - t0))
                shared.window = dict(returns=[], reps=[], ent_a=[], ent_x=[])
                while shared.next_log <= shared.step:
                    shared.next_log += config.log_interval
        if last.terminal:
            obs = env.reset()
            ep_return = 0.0
