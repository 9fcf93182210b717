"""Command-line entry point: ``figar {run,compare,sweep,oracle,report}``.

Exit status is 0 on success, 2 for invalid configuration or inputs and 3
for numeric divergence.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

from figar import runner
from figar.config import OUTPUT_ENV_VAR, apply_environment, load_config
from figar.envs import make_env
from figar.errors import ConfigurationError, NumericError
from figar.oracle import solve

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load(path):
    p = Path(path)
    if p.suffix == ".json" or p.is_dir():
        cfg = runner.config_from_manifest(p)
        return type(cfg).from_dict(apply_environment(cfg.to_dict()))
    return load_config(p)


def cmd_run(args):
    cfg = _load(args.config)
    run_dir, metrics = runner.run_experiment(cfg, args.output_root)
    print(run_dir)
    for k, v in metrics.items():
        print(f"{k}: {v}")


def cmd_compare(args):
    row, path = runner.compare_runs(args.figar_run, args.baseline_run, args.out)
    print(path)
    print(f"{row.task}: figar {row.figar:.4f} baseline {row.baseline:.4f} improvement {row.improvement:.4f}")


def cmd_sweep(args):
    cfg = _load(args.config)
    path, rows = runner.sweep_variants(cfg, args.variants, args.output_root)
    print(path)
    for r in rows:
        print(f"{r[0]}: mean_return {r[2]:.4f} mean_repetition {r[5]:.3f}")


def _param(text):
    k, sep, v = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return k, float(v) if "." in v or "e" in v else int(v)


def cmd_oracle(args):
    params = dict(args.param or [])
    env = make_env(args.env, **params)
    if not hasattr(env, "n_states"):
        raise ConfigurationError(f"{args.env} is not tabular; the oracle needs a finite state space")
    sol = solve(env, args.repetition_set, args.gamma, args.tol)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sol.to_csv(out)
    print(out)
    print(f"V*(start) = {float(sol.V[env.start_state])!r}")


def cmd_report(args):
    points, abl = runner.report_run(args.run_dir)
    for p in points:
        print(f"p={p.p}: mean_return {p.mean_return:.4f} mean_repetition {p.mean_repetition:.3f}")
    print(f"ablation: full {abl.full:.4f} forced-1 {abl.ablated:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="figar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train, evaluate and write a run directory")
    p.add_argument("config", help="INI config, or a run directory / manifest.json to repeat")
    p.add_argument("--output-root", default=None, help=f"overrides the config and ${OUTPUT_ENV_VAR}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="percentage improvement of one run over a baseline run")
    p.add_argument("figar_run")
    p.add_argument("baseline_run")
    p.add_argument("--out", default=None, help="default: <figar_run>/comparison.csv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="one run per repetition-set variant plus a baseline")
    p.add_argument("config")
    p.add_argument("variants", nargs="+")
    p.add_argument("--output-root", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="exact solution of a tabular environment")
    p.add_argument("env")
    p.add_argument("--repetition-set", default="figar-10")
    p.add_argument("--param", action="append", type=_param, help="env parameter, e.g. length=10")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", default="oracle.csv")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="sampling sweep and repetition-head ablation for a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "output_root", None) is None and os.environ.get(OUTPUT_ENV_VAR):
        args.output_root = os.environ[OUTPUT_ENV_VAR]
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
