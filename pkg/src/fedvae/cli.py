"""Command line: ``fedvae {train,search,evaluate,synthesize}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing

from . import config as config_mod
from .config import ExperimentConfig
from .federation import FlConfig

log = logging.getLogger("fedvae")


def _fl_flags(parser: argparse.ArgumentParser) -> None:
    hints = typing.get_type_hints(FlConfig)
    group = parser.add_argument_group("federation overrides")
    for f in dataclasses.fields(FlConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"fl_{f.name}", type=hints[f.name],
                           default=None, metavar=hints[f.name].__name__.upper(),
                           help=f"override [federation] {f.name} (default {f.default!r})")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file (INI); defaults apply when omitted")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--output-dir", default=None,
                        help=f"output directory (else ${config_mod.OUTPUT_DIR_ENV}, else [run] output_dir)")
    parser.add_argument("--no-eval", action="store_true", help="skip Fréchet and utility scoring")
    _fl_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedvae", description="Federated conditional VAE simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train one configuration and write artifacts"))
    _common(sub.add_parser("search", help="hyperparameter search, one subdirectory per trial"))
    ev = sub.add_parser("evaluate", help="re-score a finished run directory")
    ev.add_argument("run_dir")
    ev.add_argument("--replicates", type=int, default=None)
    syn = sub.add_parser("synthesize", help="write a class-per-row PGM grid from a finished run")
    syn.add_argument("run_dir")
    syn.add_argument("--per-class", type=int, default=10)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True, help="output .pgm path")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("fl_") and v is not None}
    if overrides:
        cfg = cfg.replace(federation=dataclasses.replace(cfg.federation, **overrides))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    from .experiment import resolve_output_dir
    cfg = cfg.replace(output_dir=str(resolve_output_dir(cfg, args.output_dir)))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from . import experiment
        if args.command == "train":
            cfg = resolve_config(args)
            outcome = experiment.run_experiment(cfg, cfg.output_dir, evaluate=not args.no_eval)
            print(json.dumps({"output_dir": str(outcome.output_dir), **outcome.summary}, indent=2))
        elif args.command == "search":
            cfg = resolve_config(args)
            ranked = experiment.search_experiment(cfg, cfg.output_dir, evaluate=not args.no_eval)
            best = ranked[0]
            print(json.dumps({"trials": len(ranked), "best_trial": best.index,
                              "best_overrides": best.overrides, "fid": best.fid,
                              "acc_cnn": best.cnn_accuracy}, indent=2, default=str))
        elif args.command == "evaluate":
            print(json.dumps(experiment.evaluate_run(args.run_dir, args.replicates), indent=2))
        elif args.command == "synthesize":
            grid = experiment.synthesize(args.run_dir, args.per_class, args.out, args.seed)
            print(f"wrote {args.out} ({grid.shape[1]}x{grid.shape[0]})")
    except KeyboardInterrupt:
        print("fedvae: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes a diagnostic and exit code
        if args.verbose:
            log.exception("command failed")
        print(f"fedvae {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
