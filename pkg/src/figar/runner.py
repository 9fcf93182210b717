"""Train / evaluate / report pipelines that write self-describing run directories.

A run directory holds ``manifest.json`` (resolved config, artifact list,
versions, wall-clock, final metrics), ``training_log.csv``,
``timing.csv``, ``eval.csv``, ``histogram.csv`` and ``policy.npz``.
"""
import csv
import json
import logging
import platform
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from figar import a3c, ddpg, reporting, trpo
from figar.config import ExperimentConfig
from figar.envs import make_env
from figar.errors import ConfigurationError, NumericError
from figar.numcore import make_rng
from figar.oracle import evaluate_policy
from figar.policy import FactoredPolicy, SamplingMode

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def env_factory(cfg):
    return lambda seed: make_env(cfg.env, seed=seed, **cfg.env_params)


def build_agent(cfg, spec):
    """Fresh, seeded networks for ``cfg``: ``{"policy": ..., "value_fn"/"critic": ...}``."""
    t = cfg.trainer
    W = cfg.W
    if cfg.kind == "a3c":
        return dict(policy=FactoredPolicy(spec.observation_dim, W, n_actions=spec.n_actions, hidden=t["hidden"],
                                          seed=cfg.seed),
                    value_fn=a3c.make_value_fn(spec.observation_dim, t["hidden"], cfg.seed))
    if cfg.kind == "trpo":
        shared = t["hidden"] if t["shared_trunk"] else None
        kw = dict(n_actions=spec.n_actions) if spec.discrete else dict(action_bounds=(spec.action_low, spec.action_high))
        return dict(policy=FactoredPolicy(spec.observation_dim, W, hidden=t["hidden"], shared_trunk=shared,
                                          seed=cfg.seed, init_log_std=t["init_log_std"], **kw))
    actor, critic = ddpg.make_agent(spec.observation_dim, W, (spec.action_low, spec.action_high),
                                    cfg.trainer_config(), cfg.seed)
    return dict(policy=actor, critic=critic)


def _train(cfg, agent):
    tc = cfg.trainer_config()
    factory = env_factory(cfg)
    if cfg.kind == "a3c":
        return a3c.train(tc, factory, agent["policy"], agent["value_fn"], cfg.seed)
    if cfg.kind == "trpo":
        out = trpo.train(tc, factory, agent["policy"], cfg.seed)
        agent["policy"].set_flat(trpo.track_best_policy(out.history))
        return out
    return ddpg.train(tc, factory, agent["policy"], agent["critic"], cfg.seed)


def save_agent(agent, path):
    np.savez(path, **{k: v.params.values for k, v in agent.items()})


def load_agent(cfg, run_dir):
    spec = make_env(cfg.env, **cfg.env_params).spec
    agent = build_agent(cfg, spec)
    with np.load(Path(run_dir) / "policy.npz") as data:
        for k, net in agent.items():
            net.params.values[:] = data[k]
    return agent


def eval_env(cfg):
    return make_env(cfg.env, seed=int(make_rng(cfg.seed, "eval-env").integers(2**31)), **cfg.env_params)


def evaluate(cfg, policy):
    return evaluate_policy(policy, eval_env(cfg), cfg.eval_episodes, SamplingMode.eps_greedy(cfg.eval_epsilon),
                           seed=cfg.seed)


def _versions():
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return dict(package=pkg, python=platform.python_version(), numpy=np.__version__, scipy=scipy.__version__)


def make_run_dir(cfg, root=None):
    root = Path(cfg.output_root if root is None else root)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{cfg.algorithm}_{cfg.env}_{cfg.repetition_set}_{cfg.seed}_{stamp}"
    path = root / base
    n = 1
    while path.exists():
        path = root / f"{base}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def run_experiment(cfg, root=None):
    """Train, evaluate and write artifacts. Returns ``(run_dir, metrics)``.

    On numeric divergence the manifest is still written (status
    ``diverged``) and :class:`NumericError` is re-raised.
    """
    run_dir = make_run_dir(cfg, root)
    t0 = time.perf_counter()
    artifacts = []
    metrics = {}
    status = "ok"
    error = None
    spec = make_env(cfg.env, **cfg.env_params).spec
    agent = build_agent(cfg, spec)
    try:
        with np.errstate(over="raise", invalid="raise"):
            train_log = _train(cfg, agent)
        train_log.write_csv(run_dir / "training_log.csv")
        artifacts.append("training_log.csv")
        if hasattr(train_log, "write_timing_csv"):
            train_log.write_timing_csv(run_dir / "timing.csv")
            artifacts.append("timing.csv")
        save_agent(agent, run_dir / "policy.npz")
        artifacts.append("policy.npz")
        ev = evaluate(cfg, agent["policy"])
        reporting.write_eval_csv(ev, run_dir / "eval.csv")
        reporting.write_histogram_csv(ev.histogram, run_dir / "histogram.csv")
        artifacts += ["eval.csv", "histogram.csv"]
        mean, lo, hi = reporting.mean_ci(ev.returns)
        metrics = dict(mean_return=mean, ci_low=lo, ci_high=hi, std_return=ev.std_return,
                       mean_discounted_return=ev.mean_discounted_return, mean_repetition=ev.mean_repetition,
                       success_rate=ev.success_rate, eval_episodes=len(ev.returns))
    except (NumericError, FloatingPointError) as exc:
        status, error = "diverged", str(exc)
        save_agent(agent, run_dir / "policy.npz")
        artifacts.append("policy.npz")
    manifest = dict(config=cfg.to_dict(), artifacts=artifacts, versions=_versions(),
                    wallclock_seconds=time.perf_counter() - t0, status=status, error=error, metrics=metrics)
    with open(run_dir / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if status != "ok":
        raise NumericError(f"run diverged: {error} (partial artifacts in {run_dir})")
    return run_dir, metrics


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise ConfigurationError(f"{run_dir}: no {MANIFEST}")
    with open(path) as fh:
        return json.load(fh)


def config_from_manifest(path_or_dir):
    p = Path(path_or_dir)
    with open(p if p.suffix == ".json" else p / MANIFEST) as fh:
        return ExperimentConfig.from_dict(json.load(fh)["config"])


def read_eval_returns(run_dir):
    with open(Path(run_dir) / "eval.csv", newline="") as fh:
        return np.array([float(row["return"]) for row in csv.DictReader(fh)])


def compare_runs(figar_dir, baseline_dir, out_path=None):
    """Write ``comparison.csv`` (one row for the shared task) and return the row."""
    fm, bm = read_manifest(figar_dir)["config"], read_manifest(baseline_dir)["config"]
    for key in ("env", "env_params", "eval_episodes", "eval_epsilon"):
        if fm[key] != bm[key]:
            raise ConfigurationError(f"runs differ in {key}: {fm[key]!r} vs {bm[key]!r}")
    row = reporting.ComparisonRow.from_scores(fm["env"], read_eval_returns(figar_dir), read_eval_returns(baseline_dir))
    out_path = Path(figar_dir) / "comparison.csv" if out_path is None else Path(out_path)
    reporting.write_comparison_csv([row], out_path)
    return row, out_path


SUMMARY_COLUMNS = ("variant", "repetition_set", "mean_return", "ci_low", "ci_high", "mean_repetition",
                   "improvement", "run_dir")


def sweep_variants(cfg, variants, root=None):
    """Run ``cfg`` once per repetition-set variant plus the matching baseline.

    Hyperparameters are shared across variants. Writes ``summary.csv`` in
    the output root and returns ``(summary_path, rows)``.
    """
    if cfg.is_baseline:
        raise ConfigurationError("sweep needs a figar-* algorithm")
    root = Path(cfg.output_root if root is None else root)
    base_cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "algorithm": "baseline-" + cfg.kind})
    base_dir, base_metrics = run_experiment(base_cfg, root)
    rows = [("baseline", "1", base_metrics["mean_return"], base_metrics["ci_low"], base_metrics["ci_high"],
             base_metrics["mean_repetition"], 0.0, str(base_dir))]
    for v in variants:
        vcfg = ExperimentConfig.from_dict({**cfg.to_dict(), "repetition_set": v})
        run_dir, m = run_experiment(vcfg, root)
        rows.append((v, ";".join(str(x) for x in vcfg.W), m["mean_return"], m["ci_low"], m["ci_high"],
                     m["mean_repetition"], reporting.improvement(m["mean_return"], base_metrics["mean_return"]),
                     str(run_dir)))
    path = root / "summary.csv"
    reporting._write(path, SUMMARY_COLUMNS, rows)
    return path, rows


def report_run(run_dir, ps=reporting.DEFAULT_SWEEP):
    """Sampling sweep and repetition-head ablation for a finished run."""
    cfg = config_from_manifest(run_dir)
    policy = load_agent(cfg, run_dir)["policy"]
    points = reporting.greedy_stochastic_sweep(policy, eval_env(cfg), ps, cfg.eval_episodes, cfg.seed)
    reporting.write_sweep_csv(points, Path(run_dir) / "sweep.csv")
    abl = reporting.ablate_repetition_head(policy, eval_env(cfg), cfg.eval_episodes, cfg.seed, cfg.eval_epsilon)
    reporting.write_ablation_csv(abl, Path(run_dir) / "ablation.csv")
    return points, abl
