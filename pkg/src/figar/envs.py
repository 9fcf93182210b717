"""Toy environments and the macro-action executor.

A macro is a primitive action repeated for up to ``x`` primitive steps.
Rewards inside the macro are discounted per primitive step,
``r = sum_i gamma**i * rho_i``, so an outer ``gamma**elapsed`` composes to
exact primitive-step discounting.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from figar.errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    action_kind: str  # "discrete" or "continuous"
    n_actions: int = 0
    action_dim: int = 0
    action_low: tuple = ()
    action_high: tuple = ()
    max_primitive_steps: int = 200
    gamma: float = 0.99

    def __post_init__(self):
        if self.observation_dim < 1:
            raise ConfigurationError("observation_dim must be positive")
        if self.action_kind == "discrete":
            if self.n_actions < 2:
                raise ConfigurationError("discrete action spaces need n >= 2")
        elif self.action_kind == "continuous":
            if self.action_dim < 1 or len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
                raise ConfigurationError("continuous action space needs per-dimension bounds")
            if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
                raise ConfigurationError("action bounds need lower < upper")
        else:
            raise ConfigurationError(f"unknown action kind {self.action_kind!r}")
        if self.max_primitive_steps < 1:
            raise ConfigurationError("max_primitive_steps must be positive")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError("gamma must lie in (0, 1]")

    @property
    def discrete(self):
        return self.action_kind == "discrete"


@dataclass
class MacroTransition:
    state: np.ndarray
    action: object
    repetition: int
    macro_reward: float
    elapsed: int
    next_state: np.ndarray
    terminal: bool
    primitive_rewards: tuple = field(default=())
    truncated: bool = False


class Env:
    """Base class. Subclasses implement ``_reset_state``, ``_step_state`` and ``encode_observation``.

    Episodes are seeded from ``(seed, episode_index)`` so a fixed master seed
    reproduces every episode. Hitting ``max_primitive_steps`` ends the episode
    as terminal with ``truncated`` set.
    """

    name = "env"

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = int(seed)
        self.episode_index = 0
        self.steps = 0
        self.done = True
        self.truncated = False
        self.rng = None
        self.state = None

    def reset(self, episode_index=None):
        if episode_index is not None:
            self.episode_index = int(episode_index)
        self.rng = np.random.default_rng([self.seed, self.episode_index])
        self.episode_index += 1
        self.steps = 0
        self.done = False
        self.truncated = False
        self.state = self._reset_state()
        return self.encode_observation(self.state)

    def step_primitive(self, action):
        """Advance one primitive step; returns ``(reward, next_obs, terminal)``."""
        if self.done:
            raise UsageError("step on a finished episode; call reset()")
        self.state, reward, terminal = self._step_state(self.state, action)
        self.steps += 1
        if not terminal and self.steps >= self.spec.max_primitive_steps:
            terminal = True
            self.truncated = True
        self.done = terminal
        return float(reward), self.encode_observation(self.state), terminal

    def observation(self):
        return self.encode_observation(self.state)

    def _reset_state(self):
        raise NotImplementedError

    def _step_state(self, state, action):
        raise NotImplementedError

    def encode_observation(self, state):
        raise NotImplementedError


class Corridor(Env):
    """States ``0..L`` on a line; action 0 moves left (walled at 0), 1 moves right.

    Every primitive step costs 1; entering ``L`` adds 10 and ends the episode.
    """

    name = "corridor"
    LEFT, RIGHT = 0, 1

    def __init__(self, length=10, gamma=0.99, max_primitive_steps=200, seed=0):
        if length < 1:
            raise ConfigurationError("corridor length must be >= 1")
        self.length = int(length)
        spec = EnvSpec(observation_dim=self.length + 1, action_kind="discrete", n_actions=2,
                       max_primitive_steps=max_primitive_steps, gamma=gamma)
        super().__init__(spec, seed)

    # tabular interface used by the oracle
    @property
    def n_states(self):
        return self.length + 1

    @property
    def start_state(self):
        return 0

    def is_terminal(self, state):
        return state == self.length

    def _move(self, state, action):
        nxt = state + 1 if action == self.RIGHT else max(state - 1, 0)
        reward = -1.0 + (10.0 if nxt == self.length else 0.0)
        return nxt, reward, nxt == self.length

    def primitive_transitions(self, state, action):
        """List of ``(prob, reward, next_state, terminal)``."""
        nxt, r, term = self._move(state, action)
        return [(1.0, r, nxt, term)]

    def _reset_state(self):
        return 0

    def _step_state(self, state, action):
        return self._move(state, int(action))

    def encode_observation(self, state):
        obs = np.zeros(self.length + 1)
        obs[int(state)] = 1.0
        return obs


class ChainSwitch(Corridor):
    """Corridor whose action is inverted with probability ``p_slip`` each primitive step."""

    name = "chainswitch"

    def __init__(self, length=10, p_slip=0.1, gamma=0.99, max_primitive_steps=200, seed=0):
        if not (0.0 <= p_slip <= 1.0):
            raise ConfigurationError("p_slip must lie in [0, 1]")
        self.p_slip = float(p_slip)
        super().__init__(length, gamma, max_primitive_steps, seed)

    def primitive_transitions(self, state, action):
        out = []
        for prob, act in ((1.0 - self.p_slip, action), (self.p_slip, 1 - action)):
            if prob > 0.0:
                nxt, r, term = self._move(state, act)
                out.append((prob, r, nxt, term))
        return out

    def _step_state(self, state, action):
        action = int(action)
        if self.rng.random() < self.p_slip:
            action = 1 - action
        return self._move(state, action)


class PointMass(Env):
    """Point in the plane driven by a scalar acceleration along the start-goal diagonal.

    Observation is ``(x, y, vx, vy)``; start ``(-1, -1)`` at rest, goal at the
    origin. Speed is capped at 1 and ``dt = 0.05``, so one primitive step
    moves at most 0.05 and the 0.05-radius goal ball cannot be jumped over.
    """

    name = "pointmass"
    DT = 0.05
    MAX_SPEED = 1.0
    GOAL_RADIUS = 0.05

    def __init__(self, gamma=0.99, max_primitive_steps=200, seed=0):
        spec = EnvSpec(observation_dim=4, action_kind="continuous", action_dim=1,
                       action_low=(-1.0,), action_high=(1.0,),
                       max_primitive_steps=max_primitive_steps, gamma=gamma)
        super().__init__(spec, seed)
        self.goal = np.zeros(2)
        self.direction = np.array([1.0, 1.0]) / math.sqrt(2.0)

    def _reset_state(self):
        return (np.array([-1.0, -1.0]), np.zeros(2))

    def _step_state(self, state, action):
        pos, vel = state
        acc = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        vel = vel + acc * self.DT * self.direction
        speed = np.linalg.norm(vel)
        if speed > self.MAX_SPEED:
            vel = vel * (self.MAX_SPEED / speed)
        pos = pos + vel * self.DT
        dist = float(np.linalg.norm(pos - self.goal))
        return (pos, vel), -dist, dist <= self.GOAL_RADIUS

    def encode_observation(self, state):
        pos, vel = state
        return np.concatenate([pos, vel])

    def reached_goal(self):
        return bool(np.linalg.norm(self.state[0] - self.goal) <= self.GOAL_RADIUS)


ENVIRONMENTS = {"corridor": Corridor, "chainswitch": ChainSwitch, "pointmass": PointMass}


def make_env(name, **params):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}") from None
    return cls(**params)


def execute_macro(env, action, x, gamma=None, allowed=None):
    """Repeat ``action`` for up to ``x`` primitive steps.

    Stops early when the episode ends. ``allowed`` (a RepetitionSet or any
    container) restricts ``x``.
    """
    if gamma is None:
        gamma = env.spec.gamma
    x = int(x)
    if x < 1:
        raise ConfigurationError(f"repetition must be >= 1, got {x}")
    if allowed is not None and x not in allowed:
        raise ConfigurationError(f"repetition {x} not in the configured set")
    state = env.observation()
    rewards = []
    macro_reward = 0.0
    terminal = False
    obs = state
    for i in range(x):
        reward, obs, terminal = env.step_primitive(action)
        macro_reward += gamma ** i * reward
        rewards.append(reward)
        if terminal:
            break
    return MacroTransition(state=state, action=action, repetition=x, macro_reward=macro_reward,
                           elapsed=len(rewards), next_state=obs, terminal=terminal,
                           primitive_rewards=tuple(rewards), truncated=env.truncated)
