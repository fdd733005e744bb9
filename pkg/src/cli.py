#!/usr/bin/env python3
"""
PINN pipeline command line.

Verbs: train, eval, ablate, diagnose, oracle. Invalid configuration exits
with status 2 and a per-field message; a failed run exits with status 1.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from .engine import experiments
from .engine.config import EvalConfig, configure_logging, load_environment, load_run_config
from .engine.errors import PinnError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2


class ConfigFileError(Exception):
    """A run config that could not be read or parsed"""


def _load_config(args: argparse.Namespace):
    try:
        return load_run_config(args.config, seed=args.seed, out=args.out)
    except (yaml.YAMLError, ValueError) as e:
        if isinstance(e, ValidationError):
            raise
        raise ConfigFileError(f"Could not read config {args.config}: {e}") from e


def _print(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _format_validation(error: ValidationError) -> str:
    lines = [f"Invalid configuration ({error.error_count()} error(s)):"]
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"  • {location}: {item['msg']}")
    return "\n".join(lines)


# ========== VERBS ==========


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = experiments.run_training(config, dry_run=args.dry_run)
    _print(result)
    if not args.dry_run and result.get("rel_l2") is not None:
        print(f"final rel-L2: {result['rel_l2']:.6e}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    eval_config = EvalConfig(nt=args.nt, nx=args.nx, n_modes=args.n_modes)
    result = experiments.evaluate_checkpoint(args.checkpoint, out_dir=args.out, eval_config=eval_config)
    _print(result)
    print(f"rel-L2: {result['rel_l2']:.6e}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    toggles = [t for group in args.toggle or [] for t in group.split(",") if t]
    if args.dry_run:
        experiments.apply_toggles(config, toggles)
        _print({"status": "ok", "dry_run": True, "rows": [name for name, _ in experiments.ablation_rows(toggles)]})
        return EXIT_OK
    result = experiments.run_ablation(config, toggles, parallel=args.parallel)
    _print(result)
    failed = [row["row"] for row in result["rows"] if row["status"] != "ok"]
    if failed:
        logger.error(f"Ablation rows failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    which = args.which or list(experiments.DIAGNOSTICS)
    result = experiments.diagnose_checkpoint(args.checkpoint, which=which, batch=args.batch, metrics_path=args.metrics)
    _print(result)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    overrides = dict(_parse_override(item) for item in args.set or [])
    eval_config = EvalConfig(nt=args.nt, nx=args.nx, n_modes=args.n_modes, dt=args.dt)
    result = experiments.generate_reference(
        args.problem, overrides=overrides, t_max=args.t_max, eval_config=eval_config, out_path=args.out
    )
    _print(result)
    return EXIT_OK


def _parse_override(item: str):
    name, sep, value = item.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"Expected NAME=VALUE, got '{item}'")
    return name, float(value)


# ========== PARSER ==========


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pinn", description="Physics-informed network training pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a model from a YAML run config")
    train.add_argument("--config", required=True, type=Path)
    train.add_argument("--seed", type=int)
    train.add_argument("--out", type=str)
    train.add_argument("--dry-run", action="store_true", help="Validate the config without writing files")
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser("eval", help="Relative L2 of a checkpoint plus grid dumps")
    evaluate.add_argument("checkpoint", type=Path)
    evaluate.add_argument("--out", type=str)
    evaluate.add_argument("--nt", type=int, default=101)
    evaluate.add_argument("--nx", type=int, default=256)
    evaluate.add_argument("--n-modes", type=int, default=512)
    evaluate.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", help="Run the component-removal table")
    ablate.add_argument("--config", required=True, type=Path)
    ablate.add_argument("--toggle", action="append", help="Component to ablate (repeatable or comma-separated)")
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--out", type=str)
    ablate.add_argument("--parallel", action="store_true", help="Run rows in a process pool (timings unreliable)")
    ablate.add_argument("--dry-run", action="store_true")
    ablate.set_defaults(func=cmd_ablate)

    diagnose = sub.add_parser("diagnose", help="NTK spectra, gradient histograms, temporal residuals")
    diagnose.add_argument("checkpoint", type=Path)
    diagnose.add_argument("--which", action="append", choices=list(experiments.DIAGNOSTICS))
    diagnose.add_argument("--batch", type=int, default=64)
    diagnose.add_argument("--metrics", type=str)
    diagnose.set_defaults(func=cmd_diagnose)

    oracle = sub.add_parser("oracle", help="Pre-generate a cached reference solution")
    oracle.add_argument("problem", choices=sorted(experiments.PROBLEMS))
    oracle.add_argument("--set", action="append", metavar="NAME=VALUE", help="Override a problem constant")
    oracle.add_argument("--t-max", type=float)
    oracle.add_argument("--nt", type=int, default=101)
    oracle.add_argument("--nx", type=int, default=256)
    oracle.add_argument("--n-modes", type=int, default=512)
    oracle.add_argument("--dt", type=float)
    oracle.add_argument("--out", type=str)
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment(Path(__file__).parent)
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(_format_validation(e), file=sys.stderr)
        return EXIT_INVALID
    except ConfigFileError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"File not found: {e.filename}", file=sys.stderr)
        return EXIT_INVALID
    except (PinnError, ValueError, RuntimeError, ArithmeticError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
