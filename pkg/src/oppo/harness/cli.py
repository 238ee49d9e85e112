"""Command line: ``oppo train|verify|sweep|plot``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from ..agent import VARIANTS
from .config import ConfigError, dump_config, load_config
from .experiment import ExperimentConfig, curve_auc, read_csv, run_experiment, sweep
from .verify import SUITES, VerifyConfig, verify_all

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "timesteps", None):
        changes["total_timesteps"] = args.timesteps
    return replace(config, **changes) if changes else config


def cmd_train(args) -> int:
    config = _experiment_config(args)
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    dump_config(config, Path(config.out_dir) / "config.yaml")
    res = run_experiment(config, workers=args.workers)
    final = res.curves()[:, -1]
    print(f"{config.variant}: {len(config.seeds)} seed(s), {config.total_timesteps} steps -> {config.out_dir}")
    print(f"final moving-average reward {final.mean():.4f} (std {final.std():.4f}), "
          f"seed-mean AUC {curve_auc(res.curves().mean(axis=0)):.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    kw = {"suites": tuple(args.suite) if args.suite else SUITES, "seed": args.seed, "nu_scale": args.nu_scale}
    if args.samples is not None:
        kw["samples"] = args.samples
    if args.instances is not None:
        kw["bound_instances"] = args.instances
    report = verify_all(VerifyConfig(**kw))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_sweep(args) -> int:
    config = _experiment_config(args)
    values = [yaml.safe_load(v) for v in args.values]
    results = sweep(config, args.param, values, workers=args.workers)
    for v, res in results.items():
        final = res.curves()[:, -1]
        print(f"{args.param}={v}\tfinal={final.mean():.4f}\tauc={curve_auc(res.curves().mean(axis=0)):.4f}\t"
              f"{res.summary_path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise UsageError("plotting needs matplotlib (pip install matplotlib)") from exc
    root = Path(args.in_dir)
    summaries = sorted(root.glob("**/summary.csv"))
    if not summaries:
        raise UsageError(f"no summary.csv found under {root}")
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in summaries:
        d = read_csv(path)
        label = str(path.parent.relative_to(root)) if path.parent != root else root.name
        ax.plot(d["timestep"], d["mean_ma_reward"], label=label)
        ax.fill_between(d["timestep"], d["mean_ma_reward"] - d["std_ma_reward"],
                        d["mean_ma_reward"] + d["std_ma_reward"], alpha=0.2)
    ax.set_xlabel("time-steps")
    ax.set_ylabel("moving-average episode reward")
    ax.legend()
    out = Path(args.out) if args.out else root / "curves.png"
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oppo", description="Optimistic PPO on tabular MDPs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one variant over the configured seeds")
    t.add_argument("--config", help="YAML experiment file")
    t.add_argument("--seed", type=int, help="run this single seed")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--out", help="output directory")
    t.add_argument("--timesteps", type=int, help="override the step budget")
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run the numerical verification suites")
    v.add_argument("--suite", action="append", help=f"one of {', '.join(SUITES)}; repeatable")
    v.add_argument("--samples", type=int, help="posterior samples for the bound suites")
    v.add_argument("--instances", type=int, help="random MDPs for the bound suites")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--nu-scale", type=float, default=1.0, help="scale the local uncertainty (mutation check)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="grid over one agent parameter")
    s.add_argument("--config")
    s.add_argument("--param", required=True)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--out")
    s.add_argument("--timesteps", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="plot summary curves found under a directory")
    pl.add_argument("--in", dest="in_dir", required=True)
    pl.add_argument("--out", help="image path (default <in>/curves.png)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"oppo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
