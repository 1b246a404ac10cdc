"""Command-line experiment runner.

Subcommands mirror the harness protocols:

    metafit gen-tasks    --out DIR --seed N [--set profile=hard ...]
    metafit train        --out DIR --set tasks_path=tasks.jsonl ...
    metafit fit          --out DIR --set tasks_path=... --set checkpoint_path=...
    metafit ablate       --out DIR [--set train_count=500 ...]
    metafit domain-shift --out DIR [--set source_profile=clean ...]

Settings come from an optional flat key=value config file (``--config``)
plus repeatable ``--set key=value`` overrides; dotted keys reach the
nested optimizer/meta/energy groups (for example ``opt.alpha_base=2e-5``).

Exit codes: 0 success, 2 invalid configuration, 3 numeric divergence,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import (
    ConfigError,
    DivergedError,
    InvalidInputError,
    NumericOverflowError,
    TrainingDivergenceError,
)
from .harness import (
    ExperimentConfig,
    apply_setting,
    gen_tasks,
    load_config_file,
    run_ablation,
    run_domain_shift,
    run_fit,
    run_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

COMMANDS = {
    "gen-tasks": gen_tasks,
    "train": run_train,
    "fit": run_fit,
    "ablate": run_ablation,
    "domain-shift": run_domain_shift,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="metafit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="flat key=value config file")
        cmd.add_argument("--seed", type=int, default=None, help="random seed")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable; dotted keys reach opt./meta./energy.)",
        )
    return parser


def config_from_args(args):
    cfg = ExperimentConfig()
    if args.config:
        load_config_file(cfg, args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergedError, TrainingDivergenceError, NumericOverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
