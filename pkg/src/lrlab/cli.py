"""Command-line interface.

Verbs: gen (write synthetic dataset CSVs), run (train one experiment),
compare (aligned table across regularizers), oracle (verification checks).
The output directory defaults to ./out and can be overridden with --out or
the LRLAB_OUT environment variable.

Exit codes: 0 success, 1 usage error, 2 numeric failure (divergence),
3 verification-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import datasets, runner
from .config import ExperimentConfig, UsageError, config_from_mapping, parse_config_file
from .netcore import TrainingDiverged
from .oracle import ORACLE_CHECKS

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_CHECK_FAILED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="lrlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    gen = sub.add_parser("gen", help="generate synthetic dataset CSVs")
    gen.add_argument("--kind", required=True, choices=datasets.DATASET_KINDS)
    gen.add_argument("--name", default="data")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--features", type=int, default=None)
    gen.add_argument("--classes", type=int, default=None)
    gen.add_argument("--targets", type=int, default=None)
    gen.add_argument("--train-n", type=int, default=None)
    gen.add_argument("--val-n", type=int, default=None)
    gen.add_argument("--test-n", type=int, default=None)
    gen.add_argument("--out", default=None)

    run = sub.add_parser("run", help="run one training experiment")
    run.add_argument("--config", default=None, help="key = value config file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field (repeatable)")
    run.add_argument("--out", default=None)

    cmp_ = sub.add_parser("compare", help="train several configs and tabulate")
    cmp_.add_argument("--configs", nargs="+", required=True, help="config files")
    cmp_.add_argument("--seeds", type=int, nargs="+", required=True)
    cmp_.add_argument("--out", default=None)

    orc = sub.add_parser("oracle", help="run verification checks")
    orc.add_argument("--check", default="all", choices=("all",) + tuple(ORACLE_CHECKS))
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--out", default=None)
    return parser


def _out_dir(arg):
    return arg or os.environ.get("LRLAB_OUT") or "out"


def _cmd_gen(args):
    params = {"noise": args.noise}
    for key, attr in (
        ("dim", "features"),
        ("classes", "classes"),
        ("targets", "targets"),
        ("train_n", "train_n"),
        ("val_n", "val_n"),
        ("test_n", "test_n"),
    ):
        value = getattr(args, attr)
        if value is not None:
            params[key] = value
    if args.kind == "gaussian-regression":
        params.pop("classes", None)
        params.pop("noise", None)
    elif args.kind == "separable-classification":
        params.pop("targets", None)
        params["dim"] = params.pop("dim", 8)
    else:
        for key in ("dim", "classes", "targets"):
            params.pop(key, None)
    out = _out_dir(args.out)
    os.makedirs(out, exist_ok=True)
    splits = datasets.generate(args.kind, seed=[args.seed, runner.STREAM_DATA], **params)
    paths = datasets.write_dataset(splits, out, args.name)
    for path in paths:
        print(path)
    return EXIT_OK


def _load_config(path, overrides):
    mapping = parse_config_file(path) if path else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping).validate()


def _cmd_run(args):
    cfg = _load_config(args.config, args.set)
    report = runner.run_experiment(cfg, _out_dir(args.out))
    print(f"run {cfg.name}: {report.epochs_run} epochs")
    print(f"final train_loss={report.final.train_loss!r} test_loss={report.final.test_loss!r}")
    print(f"metrics: {report.metrics_path}")
    print(f"report: {report.report_path}")
    return EXIT_OK


def _cmd_compare(args):
    configs = [config_from_mapping(parse_config_file(path)).validate() for path in args.configs]
    rows, table_path = runner.compare(configs, args.seeds, _out_dir(args.out))
    print(f"table: {table_path}")
    for row in rows:
        print(
            f"{row['name']}: test_loss {row['test_loss_mean']:.6g} +- {row['test_loss_std']:.3g}"
        )
    return EXIT_OK


def _cmd_oracle(args):
    names = list(ORACLE_CHECKS) if args.check == "all" else [args.check]
    ok = runner.run_checks(names, args.seed, _out_dir(args.out))
    print("checks: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen": _cmd_gen,
            "run": _cmd_run,
            "compare": _cmd_compare,
            "oracle": _cmd_oracle,
        }[args.verb]
        return handler(args)
    except (UsageError, datasets.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
