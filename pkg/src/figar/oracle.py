"""Exact solvers for small tabular environments.

The macro model of each ``(state, action, repetition)`` is built by
enumerating every primitive branch, so it carries no sampling error. These
solutions are the ground truth the trainers are checked against.
"""
import csv
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from figar.envs import execute_macro
from figar.errors import ConfigurationError, NumericError
from figar.numcore import make_rng
from figar.policy import Decision, GREEDY, make_repetition_set, repetition_histogram

STATE_CAP = 10_000
MAX_REPETITION = 50


@dataclass
class TabularSmdp:
    n_states: int
    n_actions: int
    W: object
    gamma: float
    terminal: np.ndarray
    # outcomes[s][a][wi] -> list of (prob, next_state, expected_macro_reward, elapsed)
    outcomes: list
    start_state: int = 0

    def check(self, atol=1e-12):
        for s in range(self.n_states):
            for a in range(self.n_actions):
                for wi in range(len(self.W)):
                    total = sum(o[0] for o in self.outcomes[s][a][wi])
                    if abs(total - 1.0) > atol:
                        raise NumericError(f"outcome probabilities at {(s, a, wi)} sum to {total}")


@dataclass
class OracleSolution:
    V: np.ndarray
    Q: np.ndarray  # (n_states, n_actions, |W|)
    best_action: np.ndarray
    best_repetition: np.ndarray
    W: object
    gamma: float
    iterations: int
    residual: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "action", "repetition", "value"])
            for s in range(len(self.V)):
                w.writerow([s, int(self.best_action[s]), int(self.best_repetition[s]), repr(float(self.V[s]))])


def expand_smdp(env, W, gamma=None, state_cap=STATE_CAP):
    """Macro-level model of a tabular env by exhaustive primitive expansion.

    Branches are merged per intermediate state, so the cost is
    ``O(|S| * |A| * sum(W) * branching)`` rather than exponential in ``x``.
    Terminal states become absorbing with zero reward.
    """
    W = make_repetition_set(W)
    gamma = env.spec.gamma if gamma is None else float(gamma)
    n_states = env.n_states
    if n_states > state_cap:
        raise ConfigurationError(f"{n_states} states exceed the expansion cap {state_cap}")
    if W.max > MAX_REPETITION:
        raise ConfigurationError(f"max repetition {W.max} exceeds {MAX_REPETITION}")
    n_actions = env.spec.n_actions
    terminal = np.array([env.is_terminal(s) for s in range(n_states)])
    outcomes = []
    for s in range(n_states):
        per_action = []
        for a in range(n_actions):
            per_rep = []
            for x in W:
                if terminal[s]:
                    per_rep.append([(1.0, s, 0.0, 1)])
                    continue
                per_rep.append(_expand_macro(env, s, a, x, gamma))
            per_action.append(per_rep)
        outcomes.append(per_action)
    return TabularSmdp(n_states, n_actions, W, gamma, terminal, outcomes, env.start_state)


def _expand_macro(env, s, a, x, gamma):
    frontier = {s: (1.0, 0.0)}  # state -> (prob, prob-weighted discounted reward)
    done = defaultdict(lambda: [0.0, 0.0])  # (next_state, elapsed) -> same
    for i in range(x):
        nxt_frontier = defaultdict(lambda: [0.0, 0.0])
        disc = gamma ** i
        for st, (p, pr) in frontier.items():
            for q, r, nxt, term in env.primitive_transitions(st, a):
                pp = p * q
                acc = done[(nxt, i + 1)] if term else nxt_frontier[nxt]
                acc[0] += pp
                acc[1] += pr * q + pp * disc * r
        frontier = {k: tuple(v) for k, v in nxt_frontier.items()}
        if not frontier:
            break
    for st, (p, pr) in frontier.items():
        acc = done[(st, x)]
        acc[0] += p
        acc[1] += pr
    return [(p, nxt, pr / p, e) for (nxt, e), (p, pr) in sorted(done.items()) if p > 0.0]


def smdp_value_iteration(model, tol=1e-10, max_iterations=100_000, tie_tol=1e-9):
    """Synchronous value iteration with ``gamma ** elapsed`` backups.

    Ties within ``tie_tol`` are broken toward the longest repetition (fewest
    decisions), then the lowest action index.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    nS, nA, nW = model.n_states, model.n_actions, len(model.W)
    rows, cols, vals = [], [], []
    R = np.zeros(nS * nA * nW)
    for s in range(nS):
        for a in range(nA):
            for wi in range(nW):
                row = (s * nA + a) * nW + wi
                for p, nxt, r, e in model.outcomes[s][a][wi]:
                    if model.terminal[nxt]:
                        R[row] += p * r
                        continue
                    R[row] += p * r
                    rows.append(row)
                    cols.append(nxt)
                    vals.append(p * model.gamma ** e)
    P = sparse.csr_matrix((vals, (rows, cols)), shape=(nS * nA * nW, nS))
    V = np.zeros(nS)
    residual = np.inf
    for it in range(1, max_iterations + 1):
        Q = (R + P @ V).reshape(nS, nA, nW)
        V_new = Q.reshape(nS, -1).max(axis=1)
        V_new[model.terminal] = 0.0
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if not np.isfinite(residual):
            raise NumericError("value iteration diverged")
        if residual < tol:
            break
    else:
        raise NumericError(f"value iteration did not converge in {max_iterations} iterations (residual {residual})")
    Q = (R + P @ V).reshape(nS, nA, nW)
    best_a = np.zeros(nS, dtype=int)
    best_x = np.zeros(nS, dtype=int)
    for s in range(nS):
        top = Q[s].max()
        near = np.argwhere(Q[s] >= top - tie_tol * max(1.0, abs(top)))
        # longest repetition first, then lowest action
        a, wi = min(near.tolist(), key=lambda t: (-t[1], t[0]))
        best_a[s], best_x[s] = a, model.W[wi]
    return OracleSolution(V, Q, best_a, best_x, model.W, model.gamma, it, residual)


def mdp_value_iteration(env, gamma=None, tol=1e-10, max_iterations=100_000):
    """Plain primitive-step value iteration, written independently of the macro model."""
    gamma = env.spec.gamma if gamma is None else float(gamma)
    V = [0.0] * env.n_states
    for _ in range(max_iterations):
        new = []
        for s in range(env.n_states):
            if env.is_terminal(s):
                new.append(0.0)
                continue
            best = -np.inf
            for a in range(env.spec.n_actions):
                q = 0.0
                for p, r, nxt, term in env.primitive_transitions(s, a):
                    q += p * (r + (0.0 if term else gamma * V[nxt]))
                best = max(best, q)
            new.append(best)
        delta = max(abs(u - v) for u, v in zip(new, V))
        V = new
        if delta < tol:
            return np.array(V)
    raise NumericError("plain value iteration did not converge")


def solve(env, W, gamma=None, tol=1e-10):
    return smdp_value_iteration(expand_smdp(env, W, gamma), tol)


class OraclePolicy:
    """Greedy policy read off an :class:`OracleSolution` (one-hot observations)."""

    def __init__(self, solution):
        self.solution = solution
        self.W = solution.W

    def decide(self, obs, mode=GREEDY, rng=None):
        s = int(np.argmax(obs))
        x = int(self.solution.best_repetition[s])
        return Decision(action=int(self.solution.best_action[s]), repetition=x, rep_index=self.W.index(x),
                        logprob_a=0.0, logprob_x=0.0)


@dataclass
class EvalResult:
    mean_return: float
    std_return: float
    mean_repetition: float
    histogram: tuple  # (labels, fractions)
    returns: np.ndarray
    discounted_returns: np.ndarray
    repetitions: list
    success_rate: float
    primitive_steps: int

    @property
    def mean_discounted_return(self):
        return float(np.mean(self.discounted_returns))


def evaluate_policy(policy, env, episodes=100, mode=GREEDY, seed=0, gamma=None,
                    force_repetition=None, max_total_steps=100_000, bin_width=3):
    """Monte Carlo evaluation at primitive-step granularity.

    Returns undiscounted episodic returns plus ``gamma``-discounted ones
    (env gamma by default). Evaluation stops at ``episodes`` episodes or once
    ``max_total_steps`` primitive steps have been spent, whichever is first.
    ``force_repetition`` overrides the repetition head (e.g. 1 for the
    repetition-head ablation). Episode ``i`` always replays env episode ``i``.
    """
    if episodes < 1:
        raise ConfigurationError("need at least one evaluation episode")
    gamma = env.spec.gamma if gamma is None else float(gamma)
    rng = make_rng(seed, "evaluate")
    returns, disc_returns, reps = [], [], []
    successes = 0
    total_steps = 0
    for ep in range(episodes):
        if total_steps >= max_total_steps:
            break
        obs = env.reset(episode_index=ep)
        ret, disc, t = 0.0, 0.0, 0
        while True:
            d = policy.decide(obs, mode, rng)
            x = d.repetition if force_repetition is None else int(force_repetition)
            tr = execute_macro(env, d.action, x, gamma)
            reps.append(x)
            for r in tr.primitive_rewards:
                ret += r
                disc += gamma ** t * r
                t += 1
            obs = tr.next_state
            if tr.terminal:
                successes += not tr.truncated
                break
        total_steps += t
        returns.append(ret)
        disc_returns.append(disc)
    returns = np.array(returns)
    w_max = max(max(reps), getattr(getattr(policy, "W", None), "max", 1))
    return EvalResult(
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        mean_repetition=float(np.mean(reps)),
        histogram=repetition_histogram(reps, bin_width, w_max),
        returns=returns,
        discounted_returns=np.array(disc_returns),
        repetitions=reps,
        success_rate=successes / len(returns),
        primitive_steps=total_steps,
    )
