"""Command-line entry points.

Subcommands: pretrain, train, probe, eval, verify.

Exit codes: 0 success, 1 usage error, 2 data or config error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .data import (
    HORIZONS,
    REPLACE_FRACTIONS,
    ConfigError,
    DataError,
    RunConfig,
    load_config,
)
from .forecaster import FREEZE_A, FREEZE_NONE
from .verify import SUITES
from . import workflows

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="rclmamba", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", help="CSV path or synth:<kind>")

    p = sub.add_parser("pretrain", help="contrastive pretraining of one block")
    common(p)
    p.add_argument("--out", required=True, help="output container path (.rclp)")
    p.add_argument("--epochs", type=int, help="override pretrain epochs")

    p = sub.add_parser("train", help="train the forecaster")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="pretrain container to transfer from")
    p.add_argument("--replace", type=float, choices=REPLACE_FRACTIONS,
                   help="fraction of layers to seed from --init")
    p.add_argument("--freeze", choices=(FREEZE_NONE, FREEZE_A), help="freeze mode for replaced layers")
    p.add_argument("--horizon", type=int, choices=HORIZONS, help="forecast horizon")
    p.add_argument("--epochs", type=int, help="override training epochs")

    p = sub.add_parser("probe", help="selectivity instrumentation")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="container with block arrays to probe")

    p = sub.add_parser("eval", help="test-split metrics for saved parameters")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--params", required=True, help="forecaster container")
    p.add_argument("--horizon", type=int, choices=HORIZONS, help="forecast horizon")

    p = sub.add_parser("verify", help="run verification oracles")
    common(p, data=False)
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--out", help="directory for report.json and sweep.csv")

    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None) is not None:
        cfg.data = args.data
    if getattr(args, "horizon", None) is not None:
        cfg.forecaster.t_out = args.horizon
    if getattr(args, "replace", None) is not None:
        cfg.transfer.replace = args.replace
    if getattr(args, "freeze", None) is not None:
        cfg.transfer.freeze = args.freeze
    return cfg


def _need_data(cfg: RunConfig, parser: _Parser) -> str:
    if cfg.data is None:
        parser.error("no dataset: pass --data or set \"data\" in the config")
    return cfg.data


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load(args)

        if args.command == "pretrain":
            if args.epochs is not None:
                cfg.pretrain.epochs = args.epochs
            data = _need_data(cfg, parser)
            summary = workflows.run_pretrain(cfg, data, args.out)
            print(f"pretrain done: {summary['epochs']} epochs, "
                  f"final loss {summary['final_total_loss']}, wrote {args.out}")
            return EXIT_OK

        if args.command == "train":
            if args.epochs is not None:
                cfg.training.epochs = args.epochs
            if args.init is None and cfg.transfer.replace > 0:
                parser.error("--replace > 0 requires --init")
            data = _need_data(cfg, parser)
            summary = workflows.run_train(cfg, data, args.init, args.out)
            print(f"train done: best epoch {summary['best_epoch']}, "
                  f"test MAE {summary['test_mae']:.6f}, MSE {summary['test_mse']:.6f}, "
                  f"wrote {args.out}")
            return EXIT_OK

        if args.command == "probe":
            data = _need_data(cfg, parser)
            summary = workflows.run_probe(cfg, data, args.init, args.out)
            print(f"probe done: {summary['n_steps']} steps over {summary['n_windows']} windows, "
                  f"FR {summary['fr']:.4f}, ME {summary['me']:.4f}, wrote {args.out}")
            return EXIT_OK

        if args.command == "eval":
            data = _need_data(cfg, parser)
            summary = workflows.run_eval(cfg, data, args.params, args.out)
            print(f"eval done: MAE {summary['test_mae']:.6f}, MSE {summary['test_mse']:.6f} "
                  f"over {summary['n_windows']} windows, wrote {args.out}")
            return EXIT_OK

        if args.command == "verify":
            result = workflows.run_verify(args.suite, cfg.seed, args.out)
            for check in result.checks:
                print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
            if not result.passed:
                print(f"suite {args.suite}: FAILED", file=sys.stderr)
                return EXIT_VERIFY
            print(f"suite {args.suite}: all checks passed")
            return EXIT_OK

    except (DataError, ConfigError) as e:
        print(f"rclmamba: {e}", file=sys.stderr)
        return EXIT_DATA
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
