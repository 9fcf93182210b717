"""Deterministic actor-critic with an action head and a repetition head.

The actor emits ``[action | softmax over W]``. The critic scores
``(s, a, x)`` where ``x`` is a one-hot repetition from replay, or the
actor's softmax output when the actor is differentiated through it.
"""
import csv
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np

from figar.envs import execute_macro
from figar.errors import ConfigurationError, NumericError
from figar.numcore import LinearSchedule, Mlp, Optimizer, ParamVector, make_rng, sample_index
from figar.policy import Decision, GREEDY, make_repetition_set


@dataclass
class DdpgConfig:
    replay_capacity: int = 10_000
    tau: float = 0.001
    batch_size: int = 64
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_mu: float = 0.0
    eps_start: float = 0.2
    eps_end: float = 0.0
    eps_steps: int = 50_000
    total_train_steps: int = 40_000
    hidden: tuple = (64, 64)
    log_interval: int = 1000

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ConfigurationError("tau must lie in (0, 1)")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ConfigurationError("replay capacity must be at least the batch size")
        if len(self.hidden) != 2:
            raise ConfigurationError("actor and critic use exactly two hidden layers")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ConfigurationError("epsilon bounds must lie in [0, 1]")

    def epsilon_schedule(self):
        return LinearSchedule(self.eps_start, self.eps_end, self.eps_steps)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of macro transitions."""

    def __init__(self, capacity, obs_dim, action_dim, n_rep):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.x = np.zeros((capacity, n_rep))
        self.r = np.zeros(capacity)
        self.elapsed = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def add(self, s, a, x_onehot, r, elapsed, s2, terminal):
        x_onehot = np.asarray(x_onehot, dtype=np.float64)
        if x_onehot.size and (np.sum(x_onehot == 1.0) != 1 or np.sum(x_onehot) != 1.0):
            raise ConfigurationError("repetition entry must be one-hot")
        i = self.head
        self.s[i], self.a[i], self.x[i] = s, a, x_onehot
        self.r[i], self.elapsed[i], self.s2[i], self.terminal[i] = r, elapsed, s2, float(terminal)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.batch(idx)

    def batch(self, idx):
        return dict(s=self.s[idx], a=self.a[idx], x=self.x[idx], r=self.r[idx],
                    elapsed=self.elapsed[idx], s2=self.s2[idx], terminal=self.terminal[idx])

    def oldest_first(self):
        """Indices ordered from oldest to newest entry."""
        start = self.head if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity


class DeterministicActor:
    """ReLU trunk feeding a bounded-tanh action head and a softmax repetition head."""

    def __init__(self, obs_dim, W, action_bounds, hidden=(64, 64), seed=0, final_scale=0.1, init=True):
        self.W = make_repetition_set(W)
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in action_bounds)
        self.action_low, self.action_high = lo, hi
        self.action_dim = lo.size
        self.obs_dim = int(obs_dim)
        self._config = dict(obs_dim=obs_dim, W=self.W, action_bounds=(lo, hi), hidden=tuple(hidden),
                            seed=seed, final_scale=final_scale)
        trunk = [self.obs_dim, *hidden]
        layout = [("trunk." + n, s) for n, s in Mlp.layout(trunk)]
        layout += [("action." + n, s) for n, s in Mlp.layout([hidden[-1], self.action_dim])]
        layout += [("rep." + n, s) for n, s in Mlp.layout([hidden[-1], len(self.W)])]
        self.params = ParamVector(layout)
        self.trunk = Mlp(trunk, "relu", "relu", params=self.params.sub("trunk."))
        self.action_head = Mlp([hidden[-1], self.action_dim], "relu", "tanh",
                               params=self.params.sub("action."), bounds=(lo, hi))
        self.rep_head = Mlp([hidden[-1], len(self.W)], "relu", "softmax", params=self.params.sub("rep."))
        self.trunk_slice = self.params.prefix_slice("trunk.")
        self.action_slice = self.params.prefix_slice("action.")
        self.rep_slice = self.params.prefix_slice("rep.")
        if init:
            self.trunk.init_params(make_rng(seed, "trunk"))
            self.action_head.init_params(make_rng(seed, "action"), final_scale)
            self.rep_head.init_params(make_rng(seed, "rep"), final_scale)

    def clone(self):
        other = DeterministicActor(**self._config, init=False)
        other.params.values[:] = self.params.values
        return other

    @property
    def output_dim(self):
        return self.action_dim + len(self.W)

    def forward(self, obs):
        """``(actions (B, |A|), repetition_probs (B, |W|))``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        feat = self.trunk.forward(obs)
        return self.action_head.forward(feat), self.rep_head.forward(feat)

    def output_vector(self, obs):
        """Concatenated ``[action | repetition distribution]`` per row."""
        a, p = self.forward(obs)
        return np.concatenate([a, p], axis=1)

    def backward(self, g_action, g_rep):
        """Flat gradient of ``sum(g_action * a) + sum(g_rep * probs)`` for the last forward."""
        grad = np.zeros(self.params.size)
        ga, dfa = self.action_head.backward(g_action)
        gx, dfx = self.rep_head.backward(g_rep)
        gt, _ = self.trunk.backward(dfa + dfx)
        grad[self.trunk_slice], grad[self.action_slice], grad[self.rep_slice] = gt, ga, gx
        return grad

    def decide(self, obs, mode=GREEDY, rng=None):
        """Greedy action with argmax (or sampled) repetition; used for evaluation."""
        a, p = self.forward(obs)
        a, p = a[0], p[0]
        if self.W.singleton:
            xi = 0
        elif mode.kind == "greedy" or (mode.kind == "eps_greedy" and rng.random() >= mode.epsilon):
            xi = int(np.argmax(p))
        else:
            xi = sample_index(p, rng)
        return Decision(action=a, repetition=self.W[xi], rep_index=xi, logprob_a=0.0,
                        logprob_x=float(np.log(p[xi])), action_probs=a.copy(), repetition_probs=p.copy())


class Critic:
    """``Q(s, a, x)``: ``s -> h1``; ``[h1, a, x] -> h2 -> scalar``.

    ``n_rep = 0`` builds a critic with no repetition input.
    """

    def __init__(self, obs_dim, action_dim, n_rep, hidden=(64, 64), seed=0, final_scale=0.1, init=True):
        self.obs_dim, self.action_dim, self.n_rep = int(obs_dim), int(action_dim), int(n_rep)
        self._config = dict(obs_dim=obs_dim, action_dim=action_dim, n_rep=n_rep, hidden=tuple(hidden),
                            seed=seed, final_scale=final_scale)
        first = [self.obs_dim, hidden[0]]
        second = [hidden[0] + self.action_dim + self.n_rep, hidden[1], 1]
        layout = [("l1." + n, s) for n, s in Mlp.layout(first)]
        layout += [("l2." + n, s) for n, s in Mlp.layout(second)]
        self.params = ParamVector(layout)
        self.l1 = Mlp(first, "relu", "relu", params=self.params.sub("l1."))
        self.l2 = Mlp(second, "relu", "linear", params=self.params.sub("l2."))
        self.l1_slice = self.params.prefix_slice("l1.")
        self.l2_slice = self.params.prefix_slice("l2.")
        if init:
            rng = make_rng(seed, "critic")
            self.l1.init_params(rng)
            self.l2.init_params(rng, final_scale)

    def clone(self):
        other = Critic(**self._config, init=False)
        other.params.values[:] = self.params.values
        return other

    def forward(self, s, a, x=None):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.asarray(a, dtype=np.float64).reshape(len(s), -1)
        h1 = self.l1.forward(s)
        parts = [h1, a]
        if self.n_rep:
            parts.append(np.asarray(x, dtype=np.float64).reshape(len(s), -1))
        return self.l2.forward(np.concatenate(parts, axis=1))[:, 0]

    def backward(self, g_q):
        """Gradient of ``sum(g_q * Q)``: ``(param_grad, dQ/da, dQ/dx or None)``."""
        grad = np.zeros(self.params.size)
        g2, dz = self.l2.backward(np.asarray(g_q, dtype=np.float64).reshape(-1, 1))
        h = self.l1.out_dim
        g1, _ = self.l1.backward(dz[:, :h])
        grad[self.l1_slice], grad[self.l2_slice] = g1, g2
        da = dz[:, h:h + self.action_dim]
        dx = dz[:, h + self.action_dim:] if self.n_rep else None
        return grad, da, dx


def critic_value(critic, s, a, x=None):
    return critic.forward(s, a, x)


def soft_update(target, live, tau):
    """``target <- tau * live + (1 - tau) * target`` elementwise."""
    if target.params.layout != live.params.layout:
        raise ConfigurationError("target and live parameter layouts differ")
    target.params.values[:] = tau * live.params.values + (1.0 - tau) * target.params.values


@dataclass
class TargetNets:
    actor: DeterministicActor
    critic: Critic

    @classmethod
    def of(cls, actor, critic):
        return cls(actor.clone(), critic.clone())

    def update(self, actor, critic, tau):
        soft_update(self.actor, actor, tau)
        soft_update(self.critic, critic, tau)


def ou_step(noise, rng, theta=0.15, sigma=0.2, mu=0.0):
    """One Ornstein-Uhlenbeck step ``n + theta * (mu - n) + sigma * N(0, 1)``."""
    return noise + theta * (mu - noise) + sigma * rng.standard_normal(noise.shape)


def act_explore(actor, obs, eps, ou_state, rng, theta=0.15, sigma=0.2, mu=0.0):
    """Noisy action and epsilon-greedy repetition.

    With probability ``eps`` the repetition is the argmax of the head,
    otherwise it is sampled from it. Returns ``(action, rep_index, ou_state)``.
    RNG use per call: OU normals, then (non-singleton ``W``) a coin and a draw.
    """
    if not (0.0 <= eps <= 1.0):
        raise ConfigurationError("epsilon must lie in [0, 1]")
    a, p = actor.forward(obs)
    a, p = a[0], p[0]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
        raise NumericError("non-finite actor output")
    ou_state = ou_step(ou_state, rng, theta, sigma, mu)
    action = np.clip(a + ou_state, actor.action_low, actor.action_high)
    if actor.W.singleton:
        xi = 0
    elif rng.random() < eps:
        xi = int(np.argmax(p))
    else:
        xi = sample_index(p, rng)
    return action, xi, ou_state


def _rep_input(critic, x):
    return x if critic.n_rep else None


def critic_targets(targets, batch, gamma):
    """``y = r + (1 - terminal) * gamma**elapsed * Q'(s', mu'(s'), f'(s'))``."""
    a2, p2 = targets.actor.forward(batch["s2"])
    q2 = targets.critic.forward(batch["s2"], a2, _rep_input(targets.critic, p2))
    return batch["r"] + (1.0 - batch["terminal"]) * gamma ** batch["elapsed"] * q2


def critic_loss(critic, targets, batch, gamma):
    """Mean squared TD error against the target networks and its critic gradient."""
    y = critic_targets(targets, batch, gamma)
    q = critic.forward(batch["s"], batch["a"], _rep_input(critic, batch["x"]))
    diff = y - q
    grad, _, _ = critic.backward(-2.0 * diff / len(diff))
    return float(np.mean(diff * diff)), grad


def critic_update(critic, targets, batch, gamma, optimizer):
    loss, grad = critic_loss(critic, targets, batch, gamma)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite critic gradient")
    optimizer.step(critic.params, grad)
    return loss


def actor_objective(actor, critic, s):
    """``mean_s Q(s, mu(s), f_x(s))`` and its gradient w.r.t. the actor parameters.

    The critic's input gradients are chained through both heads; the
    repetition head is reached through its softmax output.
    """
    a, p = actor.forward(s)
    q = critic.forward(s, a, _rep_input(critic, p))
    _, da, dx = critic.backward(np.full(len(q), 1.0 / len(q)))
    if dx is None:
        dx = np.zeros_like(p)
    return float(np.mean(q)), actor.backward(da, dx)


def actor_update(actor, critic, batch, optimizer):
    value, grad = actor_objective(actor, critic, batch["s"])
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite actor gradient")
    optimizer.step(actor.params, -grad)
    return grad


@dataclass
class DdpgLog:
    rows: List[dict] = field(default_factory=list)
    timing: List[tuple] = field(default_factory=list)
    episode_returns: List[float] = field(default_factory=list)
    decision_steps: int = 0
    primitive_steps: int = 0
    updates: int = 0

    COLUMNS = ("decision_step", "mean_episode_return", "mean_repetition", "critic_loss", "epsilon")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in self.COLUMNS)])

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("decision_step", "wallclock"))
            for step, wall in self.timing:
                w.writerow([step, f"{wall:.3f}"])


def make_agent(obs_dim, W, action_bounds, config, seed=0):
    actor = DeterministicActor(obs_dim, W, action_bounds, config.hidden, seed)
    n_rep = 0 if actor.W.singleton else len(actor.W)
    critic = Critic(obs_dim, actor.action_dim, n_rep, config.hidden, seed)
    return actor, critic


def train(config, env_factory, actor, critic, seed=0, on_update=None):
    """Train in place for ``config.total_train_steps`` decisions, one update per decision.

    Updates start once the replay holds a full batch. Time-limit
    truncations are stored as non-terminal so the critic still bootstraps.
    ``on_update(actor, critic)`` is called after every update.
    """
    env = env_factory(int(make_rng(seed, "env", 0).integers(2**31)))
    rng = make_rng(seed, "worker", 0)
    W = actor.W
    n_rep = critic.n_rep
    targets = TargetNets.of(actor, critic)
    opt_a = Optimizer("adam", actor.params.size, config.actor_lr)
    opt_c = Optimizer("adam", critic.params.size, config.critic_lr)
    replay = ReplayBuffer(config.replay_capacity, actor.obs_dim, actor.action_dim, n_rep)
    eps_at = config.epsilon_schedule()
    log = DdpgLog()
    t0 = time.perf_counter()
    obs = env.reset()
    ou = np.full(actor.action_dim, config.ou_mu)
    ep_return = 0.0
    win_returns, win_reps, win_loss = [], [], []
    for step in range(config.total_train_steps):
        eps = eps_at(step)
        action, xi, ou = act_explore(actor, obs, eps, ou, rng, config.ou_theta, config.ou_sigma, config.ou_mu)
        tr = execute_macro(env, action, W[xi], config.gamma)
        onehot = np.zeros(n_rep)
        if n_rep:
            onehot[xi] = 1.0
        replay.add(obs, action, onehot, tr.macro_reward, tr.elapsed, tr.next_state,
                   tr.terminal and not tr.truncated)
        ep_return += sum(tr.primitive_rewards)
        log.primitive_steps += tr.elapsed
        win_reps.append(W[xi])
        obs = tr.next_state
        if tr.terminal:
            log.episode_returns.append(ep_return)
            win_returns.append(ep_return)
            obs = env.reset()
            ou = np.full(actor.action_dim, config.ou_mu)
            ep_return = 0.0
        if len(replay) >= config.batch_size:
            batch = replay.sample(config.batch_size, rng)
            win_loss.append(critic_update(critic, targets, batch, config.gamma, opt_c))
            actor_update(actor, critic, batch, opt_a)
            targets.update(actor, critic, config.tau)
            log.updates += 1
            if on_update is not None:
                on_update(actor, critic)
        done = step + 1
        if done % config.log_interval == 0 or done == config.total_train_steps:
            log.rows.append(dict(
                decision_step=done,
                mean_episode_return=float(np.mean(win_returns)) if win_returns else float("nan"),
                mean_repetition=float(np.mean(win_reps)),
                critic_loss=float(np.mean(win_loss)) if win_loss else float("nan"),
                epsilon=float(eps),
            ))
            log.timing.append((done, time.perf_counter() - t0))
            win_returns, win_reps, win_loss = [], [], []
    log.decision_steps = config.total_train_steps
    return log
