"""Command-line entry point: ``fedctta run | sweep | show``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config
from .errors import ConfigurationError, UsageError
from .report import emit_summary, load_table, run_ablation, run_to_dir

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "method": "method",
    "tta_mode": "tta_mode",
    "clients": "clients",
    "slots": "slots",
    "batch_size": "batch_size",
    "agg_interval": "agg_interval",
    "metric": "metric",
    "tau": "tau",
    "probes": "probes",
    "clusters": "drift.n_clusters",
    "change_period": "drift.change_period",
}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--method")
    p.add_argument("--tta-mode", dest="tta_mode")
    p.add_argument("--clients", type=int)
    p.add_argument("--slots", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--agg-interval", dest="agg_interval", type=int)
    p.add_argument("--metric")
    p.add_argument("--tau", type=float)
    p.add_argument("--probes", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--change-period", dest="change_period", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--out-dir", dest="out_dir", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedctta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment configuration")
    _add_config_flags(run)
    run.add_argument("--seeds", type=_int_list,
                     help="comma-separated seeds; one sub-directory per seed plus a joint summary")

    sweep = sub.add_parser("sweep", help="seed-paired ablation over one config axis")
    _add_config_flags(sweep)
    sweep.add_argument("--axis", required=True,
                       help="agg_interval, batch_size, metric, tau, sh, th or any config key")
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.add_argument("--seeds", type=_int_list, default=[0])
    sweep.add_argument("--methods", help="comma-separated methods (default: the config's)")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    show = sub.add_parser("show", help="pretty-print a summary.json or sweep.json")
    show.add_argument("path", type=Path)
    return parser


def config_from_args(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"expected KEY=VALUE, got {item!r}", key="--set")
        overrides[key.strip()] = value.strip()
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = str(value)
    return parse_config(args.config, overrides)


def cmd_run(args) -> int:
    config = config_from_args(args)
    seeds = args.seeds or [config.seed]
    if len(seeds) == 1:
        run_to_dir(config.replace(seed=seeds[0]), args.out_dir)
        print((args.out_dir / "summary.txt").read_text(), end="")
        return 0
    results = [run_to_dir(config.replace(seed=s), args.out_dir / f"seed{s}") for s in seeds]
    table = emit_summary(results, args.out_dir / "summary.json")
    print(table.render(), end="")
    return 0


def cmd_sweep(args) -> int:
    config = config_from_args(args)
    methods = args.methods.split(",") if args.methods else None
    table = run_ablation(args.axis, args.values.split(","), config, seeds=args.seeds,
                         methods=methods, out_dir=args.out_dir, jobs=args.jobs)
    print(table.render(), end="")
    return 0


def cmd_show(args) -> int:
    print(load_table(args.path).render(), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "sweep": cmd_sweep, "show": cmd_show}[args.command]
    try:
        return handler(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"fedctta: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
