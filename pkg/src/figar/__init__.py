"""Factored action-repetition policies over actor-critic, trust-region and deterministic policy gradients."""
from figar.envs import ChainSwitch, Corridor, PointMass, execute_macro, make_env
from figar.errors import ConfigurationError, NumericError, UsageError
from figar.oracle import evaluate_policy, solve
from figar.policy import FactoredPolicy, RepetitionSet, SamplingMode, make_repetition_set

__all__ = [
    "ChainSwitch", "ConfigurationError", "Corridor", "FactoredPolicy", "NumericError", "PointMass",
    "RepetitionSet", "SamplingMode", "UsageError", "evaluate_policy", "execute_macro", "make_env",
    "make_repetition_set", "solve",
]
