"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 a recorded acceptance check failed (``report`` only).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .synthgen import DatasetFormatError

log = logging.getLogger("deconfound")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECKS = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (YAML or JSON)")
    p.add_argument("--out", help="run directory (defaults to output_dir from the config)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--replicates", type=int, help="replicate count override")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deconfound", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("generate", help="write source/target datasets"), True)
    _common(sub.add_parser("train", help="train replicates and write metrics"), True)
    _common(sub.add_parser("sweep-imbalance", help="standard models over engineered base-rate ratios"), True)

    p = sub.add_parser("probe", help="predict the nuisance from a model's scores")
    _common(p, False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=40)

    p = sub.add_parser("attribute", help="Expected Gradients attributions for one sample")
    _common(p, False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--n-samples", type=int, default=2000)

    _common(sub.add_parser("report", help="join the run's metric files and check results"), False)
    return parser


def _resolve(args) -> tuple[ExperimentConfig | None, Path]:
    config = load_config(args.config) if args.config else None
    if config is not None:
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.replicates is not None:
            if args.replicates < 1:
                raise ConfigError("--replicates must be >= 1")
            updates["replicates"] = args.replicates
        if updates:
            config = config.model_copy(update=updates)
    if args.out:
        out = Path(args.out)
    elif config is not None:
        out = Path(config.output_dir)
    else:
        raise ConfigError("--out is required without --config")
    return config, out


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help exits 0, parse errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        config, out = _resolve(args)
        seed = args.seed if args.seed is not None else (config.seed if config else 0)
        if args.command == "generate":
            for path in harness.cmd_generate(config, out).values():
                print(path)
        elif args.command == "train":
            print(harness.cmd_train(config, out))
        elif args.command == "sweep-imbalance":
            print(harness.cmd_sweep_imbalance(config, out))
        elif args.command == "probe":
            print(harness.cmd_probe(args.model, args.data, out, seed, args.epochs))
        elif args.command == "attribute":
            print(harness.cmd_attribute(args.model, args.data, out, args.index, args.n_samples, seed))
        elif args.command == "report":
            path, failed = harness.cmd_report(out)
            print(harness.format_table(path))
            for name in failed:
                log.error("check failed: %s", name)
            return EXIT_CHECKS if failed else EXIT_OK
    except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures surface as exit code 2
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
