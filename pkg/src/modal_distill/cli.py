"""``modal-distill`` command-line entry point.

Each subcommand takes an optional YAML/JSON config, ``--out DIR`` and any
number of ``--set key.path=value`` overrides; the dedicated flags below are
shorthands for particular fields. On success the summary JSON is printed
to stdout and the exit code is 0. On failure a single JSON error record is
printed to stderr, nothing is left under ``--out``, and the exit code is 2
for configuration errors and 1 otherwise.

``MODAL_DISTILL_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from typing import Any, Sequence

from . import commands, recipes
from .config import ConfigError, parse_override

log = logging.getLogger("modal_distill")

# flag dest -> config field it overrides, per command
FLAG_FIELDS: dict[str, dict[str, str]] = {
    "gen-data": {"kind": "kind", "seed": "seed", "scenes": "scenes"},
    "train-teacher": {"seed": "train.seed", "epochs": "train.epochs"},
    "transfer": {"seed": "seed", "iterations": "iterations"},
    "finetune": {"mode": "mode", "seed": "train.seed", "epochs": "train.epochs"},
    "probe": {"layer": "layer"},
    "sweep-layers": {"points": "points", "seed": "seed"},
    "zero-shot": {"seam": "seam"},
    "eval": {"metric": "metric"},
    "gradcheck": {"seed": "seed"},
}


def _points(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modal-distill", description="Cross-modal feature transfer on small CNNs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str, config_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("config", nargs=None if config_required else "?", help="YAML or JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        return p

    p = add("gen-data", "generate a toy dataset (optionally paired)", config_required=False)
    p.add_argument("--kind", choices=["shapes", "invertible_affine", "channel_permute", "complementary_halves"])
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int)

    p = add("train-teacher", "train a source-modality classifier")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = add("transfer", "fit a student to a frozen teacher's features on paired data")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)

    p = add("finetune", "attach a head to a trunk and train on labels")
    p.add_argument("--mode", choices=["all", "fc_only", "from_scratch"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)

    p = add("probe", "linear probe on frozen features")
    p.add_argument("--layer")

    p = add("sweep-layers", "transfer at several points and compare downstream accuracy")
    p.add_argument("--points", type=_points, help="comma-separated layer names")
    p.add_argument("--seed", type=int)

    p = add("zero-shot", "student lower layers under teacher upper layers, no target labels")
    p.add_argument("--seam")

    p = add("eval", "accuracy / mean AP of one model or fused scores of several")
    p.add_argument("--metric", choices=["acc", "map"])

    p = add("gradcheck", "finite-difference check of every kernel", config_required=False)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("recipe", help="run a bundled experiment recipe")
    p.add_argument("name", choices=recipes.RECIPES)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a toy benchmark field")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    ov: dict[str, Any] = {}
    for dest, path in FLAG_FIELDS.get(args.command, {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            ov[path] = value
    for expr in args.set:
        keys, value = parse_override(expr)
        ov[".".join(keys)] = value
    return ov


def error_record(command: str | None, exc: BaseException) -> dict[str, Any]:
    rec: dict[str, Any] = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["fields"] = [{"path": p, "message": m} for p, m in exc.errors]
    return rec


def _thread_limit():
    raw = os.environ.get("MODAL_DISTILL_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([("MODAL_DISTILL_THREADS", f"expected a positive integer, got {raw!r}")]) from None
    if n < 1:
        raise ConfigError([("MODAL_DISTILL_THREADS", f"expected a positive integer, got {raw!r}")])
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(args: argparse.Namespace) -> dict[str, Any]:
    with _thread_limit():
        if args.command == "recipe":
            toy: dict[str, Any] = {}
            for expr in args.set:
                keys, value = parse_override(expr)
                if keys[0] == "toy":
                    keys = keys[1:]
                toy[".".join(keys)] = value
            from .config import apply_overrides

            return recipes.cmd_recipe(args.name, args.out, seed=args.seed, toy=apply_overrides({}, toy), log=log.info)
        ov = _overrides(args)
        if args.config is None:
            return commands.execute(args.command, {}, args.out, overrides=ov)
        return commands.execute_file(args.command, args.config, args.out, overrides=ov)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        summary = run(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(json.dumps(error_record(args.command, exc)), file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps(error_record(args.command, exc)), file=sys.stderr)
        return 1
    if args.command == "gradcheck":
        for name, err in summary["max_rel_error"].items():
            print(f"{name:<24} {err:.3e} {'ok' if err <= summary['tolerance'] else 'FAIL'}", file=sys.stderr)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0 if summary.get("passed", True) else 1


if __name__ == "__main__":
    sys.exit(main())
