"""Plain single-head A3C, TRPO and DDPG.

These know nothing about repetition: every action lasts one primitive
step. They share seeding conventions with the factored trainers so that a
run with ``W = {1}`` can be compared parameter-for-parameter.
"""
import numpy as np

from figar.errors import NumericError
from figar.numcore import (
    LOG_2PI,
    Mlp,
    Optimizer,
    ParamVector,
    categorical_kl,
    entropy_logit_grad,
    gaussian_kl,
    log_softmax,
    logprob_logit_grad,
    make_rng,
    sample_index,
)
from figar.trpo import KSchedule, conjugate_gradient


def _env_and_rng(env_factory, seed):
    env = env_factory(int(make_rng(seed, "env", 0).integers(2**31)))
    return env, make_rng(seed, "worker", 0)


# ---------------------------------------------------------------------------
# A3C (single worker)

def a3c_policy(obs_dim, n_actions, hidden=(32,), activation="tanh", seed=0, final_scale=0.01):
    return Mlp([obs_dim, *hidden, n_actions], activation, "softmax", rng=make_rng(seed, "action"),
               final_scale=final_scale)


def a3c_train(policy, value_fn, env_factory, total_steps, n=20, beta=0.02, lr=1e-3, gamma=0.99,
              decay=0.99, eps=1e-6, seed=0, on_update=None):
    """n-step advantage actor-critic; returns the number of updates."""
    env, rng = _env_and_rng(env_factory, seed)
    opt_pi = Optimizer("rmsprop-shared", policy.params.size, lr, anneal_steps=total_steps, decay=decay, eps=eps)
    opt_v = Optimizer("rmsprop-shared", value_fn.params.size, lr, anneal_steps=total_steps, decay=decay, eps=eps)
    obs = env.reset()
    step = updates = 0
    while step < total_steps:
        states, actions, rewards = [], [], []
        done = False
        for _ in range(n):
            probs = policy.forward(obs)
            a = sample_index(probs, rng)
            r, nxt, done = env.step_primitive(a)
            states.append(obs)
            actions.append(a)
            rewards.append(r)
            obs = nxt
            step += 1
            if done or step >= total_steps:
                break
        G = 0.0 if done else float(value_fn.forward(obs)[0])
        targets = np.empty(len(rewards))
        for k in reversed(range(len(rewards))):
            G = rewards[k] + gamma * G
            targets[k] = G
        S = np.stack(states)
        acts = np.array(actions)
        values = value_fn.forward(S)[:, 0]
        adv = targets - values
        probs, logits = policy.forward_full(S)
        logp = log_softmax(logits)
        g = -(adv[:, None] * logprob_logit_grad(probs, acts)) - beta * entropy_logit_grad(probs, logp)
        g_pi, _ = policy.backward(g, wrt="pre")
        v = value_fn.forward(S)[:, 0]
        diff = targets - v
        g_v, _ = value_fn.backward((-2.0 * diff / len(diff))[:, None])
        opt_pi.step(policy.params, g_pi, step)
        opt_v.step(value_fn.params, g_v, step)
        updates += 1
        if on_update is not None:
            on_update(policy, value_fn)
        if done:
            obs = env.reset()
    return updates


# ---------------------------------------------------------------------------
# TRPO

class GaussianOrSoftmaxPolicy:
    """Single action head: softmax over ``n_actions`` or bounded-tanh mean with free ``log_std``."""

    def __init__(self, obs_dim, n_actions=None, action_bounds=None, hidden=(32,), activation="tanh",
                 seed=0, init_log_std=0.0, final_scale=0.01):
        self.discrete = n_actions is not None
        if self.discrete:
            out, transform, bounds = int(n_actions), "softmax", None
        else:
            lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in action_bounds)
            self.action_low, self.action_high = lo, hi
            out, transform, bounds = lo.size, "tanh", (lo, hi)
        sizes = [obs_dim, *hidden, out]
        layout = [("action." + k, s) for k, s in Mlp.layout(sizes)]
        if not self.discrete:
            layout.append(("log_std", (out,)))
        self.params = ParamVector(layout)
        self.net = Mlp(sizes, activation, transform, params=self.params.sub("action."), bounds=bounds)
        self.net.init_params(make_rng(seed, "action"), final_scale)
        if not self.discrete:
            self.params["log_std"][...] = init_log_std
            self.ls_slice = self.params.slice("log_std")
        self.net_slice = self.params.prefix_slice("action.")

    def dist(self, S):
        """``(probs, logp)`` or ``(mean, log_std)`` on a batch."""
        if self.discrete:
            probs, logits = self.net.forward_full(S)
            return probs, log_softmax(logits)
        return self.net.forward(S), self.params["log_std"].copy()

    def logprob(self, d, actions):
        if self.discrete:
            return d[1][np.arange(len(actions)), actions]
        mean, log_std = d
        u = (actions - mean) / np.exp(log_std)
        return np.sum(-0.5 * u * u - log_std - 0.5 * LOG_2PI, axis=-1)

    def backward(self, g_out, g_ls=None):
        grad = np.zeros(self.params.size)
        g, _ = self.net.backward(g_out, wrt="pre" if self.discrete else "output")
        grad[self.net_slice] = g
        if g_ls is not None:
            grad[self.ls_slice] = g_ls
        return grad


def trpo_train(policy, env_factory, iterations, delta=0.01, cg_iters=10, damping=0.1, k_min=5, k_max=50,
               gamma=0.99, max_backtracks=10, seed=0, on_update=None):
    """Single-path TRPO with a linear return-based episodes-per-batch schedule."""
    env, rng = _env_and_rng(env_factory, seed)
    sched = KSchedule(k_min, k_max)
    last = None
    for _ in range(iterations):
        K = sched.k_for(last)
        S, A, Q, rets = [], [], [], []
        for _ in range(K):
            obs = env.reset()
            rewards = []
            while True:
                d = policy.dist(obs[None, :])
                if policy.discrete:
                    a = sample_index(d[0][0], rng)
                    a_exec = a
                else:
                    a = d[0][0] + np.exp(d[1]) * rng.standard_normal(d[0].shape[1])
                    a_exec = np.clip(a, policy.action_low, policy.action_high)
                r, nxt, done = env.step_primitive(a_exec)
                S.append(obs)
                A.append(a)
                rewards.append(r)
                obs = nxt
                if done:
                    break
            G = 0.0
            q = np.empty(len(rewards))
            for k in reversed(range(len(rewards))):
                G = rewards[k] + gamma * G
                q[k] = G
            Q.append(q)
            rets.append(sum(rewards))
        last = float(np.mean(rets))
        sched.observe(last)
        S = np.stack(S)
        A = np.array(A) if policy.discrete else np.stack(A)
        Q = np.concatenate(Q)
        N = len(Q)
        old = policy.dist(S)
        old_lp = policy.logprob(old, A)

        def surrogate(with_grad):
            d = policy.dist(S)
            ratio = np.exp(policy.logprob(d, A) - old_lp)
            L = np.mean(ratio * Q)
            if not with_grad:
                return L, None
            w = (ratio * Q / N)[:, None]
            if policy.discrete:
                g = -d[0].copy()
                g[np.arange(N), A] += 1.0
                return L, policy.backward(w * g)
            var = np.exp(2.0 * d[1])
            diff = A - d[0]
            return L, policy.backward(w * (diff / var), (w * (diff * diff / var - 1.0)).sum(axis=0))

        def kl():
            d = policy.dist(S)
            if policy.discrete:
                return np.mean(categorical_kl(old[0], old[1], d[1]))
            return np.mean(gaussian_kl(old[0], old[1], d[0], d[1]))

        def fvp(v):
            d = policy.dist(S)
            dout, dpre = policy.net.jvp(v[policy.net_slice])
            if policy.discrete:
                p = d[0]
                return policy.backward(p * (dpre - np.sum(p * dpre, axis=1, keepdims=True)) / N) + damping * v
            return policy.backward(dout / np.exp(2.0 * d[1]) / N, 2.0 * v[policy.ls_slice]) + damping * v

        theta = policy.params.values.copy()
        s0, g = surrogate(True)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite surrogate gradient")
        if np.any(g):
            x = conjugate_gradient(fvp, g, cg_iters)
            shs = x @ fvp(x)
            if np.isfinite(shs) and shs > 0.0:
                step = np.sqrt(2.0 * delta / shs) * x
                frac = 1.0
                accepted = False
                for _ in range(max_backtracks):
                    new = theta.copy()
                    new += frac * step
                    policy.params.values[:] = new
                    s1, _ = surrogate(False)
                    if kl() <= delta and s1 > s0:
                        accepted = True
                        break
                    frac *= 0.5
                if not accepted:
                    policy.params.values[:] = theta
        if on_update is not None:
            on_update(policy)


# ---------------------------------------------------------------------------
# DDPG

class PlainActor:
    def __init__(self, obs_dim, action_bounds, hidden=(64, 64), seed=0, final_scale=0.1):
        lo, hi = (np.asarray(b, dtype=np.float64).reshape(-1) for b in action_bounds)
        self.low, self.high = lo, hi
        sizes = [obs_dim, *hidden]
        layout = [("trunk." + k, s) for k, s in Mlp.layout(sizes)]
        layout += [("action." + k, s) for k, s in Mlp.layout([hidden[-1], lo.size])]
        self.params = ParamVector(layout)
        self.trunk = Mlp(sizes, "relu", "relu", params=self.params.sub("trunk."))
        self.head = Mlp([hidden[-1], lo.size], "relu", "tanh", params=self.params.sub("action."), bounds=(lo, hi))
        self.trunk.init_params(make_rng(seed, "trunk"))
        self.head.init_params(make_rng(seed, "action"), final_scale)
        self.t_slice = self.params.prefix_slice("trunk.")
        self.h_slice = self.params.prefix_slice("action.")

    def forward(self, S):
        return self.head.forward(self.trunk.forward(np.atleast_2d(S)))

    def backward(self, g):
        grad = np.zeros(self.params.size)
        gh, df = self.head.backward(g)
        gt, _ = self.trunk.backward(df)
        grad[self.t_slice], grad[self.h_slice] = gt, gh
        return grad


class PlainCritic:
    def __init__(self, obs_dim, action_dim, hidden=(64, 64), seed=0, final_scale=0.1):
        self.params = ParamVector([("l1." + k, s) for k, s in Mlp.layout([obs_dim, hidden[0]])]
                                  + [("l2." + k, s) for k, s in Mlp.layout([hidden[0] + action_dim, hidden[1], 1])])
        self.l1 = Mlp([obs_dim, hidden[0]], "relu", "relu", params=self.params.sub("l1."))
        self.l2 = Mlp([hidden[0] + action_dim, hidden[1], 1], "relu", "linear", params=self.params.sub("l2."))
        rng = make_rng(seed, "critic")
        self.l1.init_params(rng)
        self.l2.init_params(rng, final_scale)
        self.s1 = self.params.prefix_slice("l1.")
        self.s2 = self.params.prefix_slice("l2.")

    def forward(self, S, A):
        return self.l2.forward(np.concatenate([self.l1.forward(S), A], axis=1))[:, 0]

    def backward(self, g):
        grad = np.zeros(self.params.size)
        g2, dz = self.l2.backward(g.reshape(-1, 1))
        h = self.l1.out_dim
        g1, _ = self.l1.backward(dz[:, :h])
        grad[self.s1], grad[self.s2] = g1, g2
        return grad, dz[:, h:]


def ddpg_train(actor, critic, env_factory, total_steps, capacity=10_000, batch_size=64, tau=0.001, gamma=0.99,
               actor_lr=1e-4, critic_lr=1e-3, ou_theta=0.15, ou_sigma=0.2, ou_mu=0.0, seed=0, on_update=None):
    env, rng = _env_and_rng(env_factory, seed)
    t_actor = ParamVector(actor.params.layout, actor.params.values.copy())
    t_critic = ParamVector(critic.params.layout, critic.params.values.copy())
    opt_a = Optimizer("adam", actor.params.size, actor_lr)
    opt_c = Optimizer("adam", critic.params.size, critic_lr)
    dim = actor.low.size
    obs_dim = critic.l1.in_dim
    buf_s, buf_a = np.zeros((capacity, obs_dim)), np.zeros((capacity, dim))
    buf_r, buf_s2, buf_t = np.zeros(capacity), np.zeros((capacity, obs_dim)), np.zeros(capacity)
    size = head = 0
    obs = env.reset()
    noise = np.full(dim, ou_mu)
    for _ in range(total_steps):
        mu = actor.forward(obs)[0]
        noise = noise + ou_theta * (ou_mu - noise) + ou_sigma * rng.standard_normal(noise.shape)
        a = np.clip(mu + noise, actor.low, actor.high)
        r, nxt, done = env.step_primitive(a)
        buf_s[head], buf_a[head], buf_r[head], buf_s2[head] = obs, a, r, nxt
        buf_t[head] = float(done and not env.truncated)
        head = (head + 1) % capacity
        size = min(size + 1, capacity)
        obs = nxt
        if done:
            obs = env.reset()
            noise = np.full(dim, ou_mu)
        if size < batch_size:
            continue
        idx = rng.integers(0, size, size=batch_size)
        S, A, R, S2, T = buf_s[idx], buf_a[idx], buf_r[idx], buf_s2[idx], buf_t[idx]
        live_a, live_c = actor.params.values.copy(), critic.params.values.copy()
        actor.params.values[:], critic.params.values[:] = t_actor.values, t_critic.values
        q2 = critic.forward(S2, actor.forward(S2))
        actor.params.values[:], critic.params.values[:] = live_a, live_c
        y = R + (1.0 - T) * gamma * q2
        diff = y - critic.forward(S, A)
        g_c, _ = critic.backward(-2.0 * diff / len(diff))
        opt_c.step(critic.params, g_c)
        critic.forward(S, actor.forward(S))
        _, dA = critic.backward(np.full(batch_size, 1.0 / batch_size))
        opt_a.step(actor.params, -actor.backward(dA))
        t_actor.values[:] = tau * actor.params.values + (1.0 - tau) * t_actor.values
        t_critic.values[:] = tau * critic.params.values + (1.0 - tau) * t_critic.values
        if on_update is not None:
            on_update(actor, critic)
