"""Comparison tables, sampling sweeps, repetition histograms and the head ablation.

Every writer emits a header row and a fixed column order; floats are
written with ``repr`` so identical inputs give byte-identical files.
"""
import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from figar.errors import ConfigurationError
from figar.oracle import evaluate_policy
from figar.policy import SamplingMode

log = logging.getLogger(__name__)

DEFAULT_SWEEP = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
Z_95 = 1.96


def improvement(f, b):
    """Relative improvement ``(f - b) / b``; ``inf`` (signed by ``f - b``) when ``b == 0``."""
    if b == 0:
        log.warning("baseline score is 0; improvement is undefined")
        return math.copysign(math.inf, f - b) if f != b else math.nan
    return (f - b) / b


def mean_ci(scores, z=Z_95):
    """``(mean, lower, upper)`` with ``mean -/+ z * sample_std / sqrt(n)``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ConfigurationError("no scores to summarize")
    m = float(s.mean())
    half = z * float(s.std(ddof=1)) / math.sqrt(s.size) if s.size > 1 else 0.0
    return m, m - half, m + half


@dataclass
class ComparisonRow:
    task: str
    figar: float
    baseline: float
    improvement: float
    figar_ci_low: float
    figar_ci_high: float
    baseline_ci_low: float
    baseline_ci_high: float
    undefined: bool = False

    COLUMNS = ("task", "figar", "baseline", "improvement", "figar_ci_low", "figar_ci_high",
               "baseline_ci_low", "baseline_ci_high", "undefined")

    @classmethod
    def from_scores(cls, task, figar_scores, baseline_scores):
        f, f_lo, f_hi = mean_ci(figar_scores)
        b, b_lo, b_hi = mean_ci(baseline_scores)
        return cls(task, f, b, improvement(f, b), f_lo, f_hi, b_lo, b_hi, b == 0)


@dataclass
class SweepPoint:
    p: float
    mean_return: float
    std_return: float
    mean_repetition: float

    COLUMNS = ("p", "mean_return", "std_return", "mean_repetition")

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ConfigurationError(f"sampling probability {self.p} outside [0, 1]")


def greedy_stochastic_sweep(policy, env, ps=DEFAULT_SWEEP, episodes=100, seed=0):
    """Evaluate with each head sampling with probability ``p`` (else argmax), independently per head."""
    points = []
    for p in ps:
        if not (0.0 <= p <= 1.0):
            raise ConfigurationError(f"sampling probability {p} outside [0, 1]")
        ev = evaluate_policy(policy, env, episodes, SamplingMode.eps_greedy(p), seed)
        points.append(SweepPoint(float(p), ev.mean_return, ev.std_return, ev.mean_repetition))
    return points


@dataclass
class AblationResult:
    full: float
    ablated: float
    full_repetition: float
    ablated_repetition: float
    full_returns: np.ndarray
    ablated_returns: np.ndarray

    COLUMNS = ("variant", "mean_return", "mean_repetition")


def ablate_repetition_head(policy, env, episodes=100, seed=0, epsilon=0.1):
    """Score the policy as trained and with every repetition forced to 1.

    Both runs are ``epsilon``-greedy and share the evaluation seed, so the
    coin flips line up decision by decision until the trajectories diverge.
    """
    mode = SamplingMode.eps_greedy(epsilon)
    full = evaluate_policy(policy, env, episodes, mode, seed)
    abl = evaluate_policy(policy, env, episodes, mode, seed, force_repetition=1)
    return AblationResult(full.mean_return, abl.mean_return, full.mean_repetition, abl.mean_repetition,
                          full.returns, abl.returns)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_comparison_csv(rows, path):
    _write(path, ComparisonRow.COLUMNS, ([getattr(r, c) for c in ComparisonRow.COLUMNS] for r in rows))


def write_sweep_csv(points, path):
    _write(path, SweepPoint.COLUMNS, ([getattr(p, c) for c in SweepPoint.COLUMNS] for p in points))


def write_histogram_csv(histogram, path):
    """``histogram`` is ``(labels, fractions)`` as returned by ``repetition_histogram``."""
    labels, fractions = histogram
    _write(path, ("bin", "fraction"), zip(labels, fractions))


def write_ablation_csv(result, path):
    _write(path, AblationResult.COLUMNS, [("full", result.full, result.full_repetition),
                                          ("ablated", result.ablated, result.ablated_repetition)])


def write_eval_csv(ev, path):
    """Per-episode evaluation scores."""
    _write(path, ("episode", "return", "discounted_return"),
           ((i, r, d) for i, (r, d) in enumerate(zip(ev.returns, ev.discounted_returns))))
