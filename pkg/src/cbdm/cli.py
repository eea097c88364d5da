"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from . import runner

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbdm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, help_, config_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=config_required, help="experiment config (INI)")
        sp.add_argument("--out", required=True, help="run / output directory")
        sp.add_argument("--seed-override", type=int, default=None,
                        help="replace [run] seed (also settable via CBDM_SEED)")
        return sp

    add("run", "train, sample and evaluate in one go")
    add("train", "generate data and train a model")
    add("sample", "draw class-conditional samples from the run's checkpoint")
    add("eval", "compute metrics for the run's samples")
    sw = add("sweep", "sub-run per grid value plus a consolidated CSV")
    sw.add_argument("--axis", required=True, choices=runner.SWEEP_AXES)
    add("oracle", "closed-form checks on 1-D Gaussian cases", config_required=False)
    rp = sub.add_parser("report", help="per-class CSV and SVG plots for a run or sweep directory")
    rp.add_argument("--out", required=True, help="run or sweep directory")
    rp.add_argument("--baseline", default=None, help="run directory to subtract per class")
    return p


def _config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg.with_seed(args.seed_override) if args.seed_override is not None else cfg
    return load_config(args.config, args.seed_override)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            for path in runner.emit_report(args.out, args.baseline):
                print(path)
            return EXIT_OK
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    actions = {
        "run": runner.run_experiment,
        "train": runner.run_train,
        "sample": runner.run_sample,
        "eval": runner.run_eval,
        "oracle": runner.run_oracle,
        "sweep": lambda c, d: runner.run_sweep(c, args.axis, d),
    }
    try:
        out = actions[args.verb](cfg, Path(args.out))
    except Exception as exc:  # the manifest already records the failure
        logging.getLogger("cbdm").debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
