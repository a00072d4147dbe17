"""Command-line entry point: ``moadepth <subcommand> [options] [--dotted.key value ...]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import KNOWN_KEYS, TrainConfig, dump_config, load_config
from .data import make_dataset
from .exceptions import MoADepthError
from .gradsuite import run_gradcheck_suite
from .model import count_params
from .train import CHECKPOINT_DIR, AblationGrid, ablate, evaluate_checkpoint, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; route it through exit code 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _dotted_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Parse leftover ``--bins.count 40`` / ``--bins.count=40`` pairs."""
    out: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        key, eq, value = token[2:].partition("=")
        if key not in KNOWN_KEYS:
            raise UsageError(f"unknown option --{key}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"option --{key} needs a value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--preset", choices=("toy", "paper"), help="backbone preset (backbone.preset)")
    p.add_argument("--data", help="dataset directory (data.dir)")
    p.add_argument("--out", help="output directory (output.dir)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")


def _resolve_config(args, extra: Sequence[str]) -> TrainConfig:
    flags = {"backbone.preset": args.preset, "data.dir": args.data,
             "output.dir": args.out, "train.seed": args.seed}
    overrides = {k: str(v) for k, v in flags.items() if v is not None}
    overrides.update(_dotted_overrides(extra))
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moadepth", description="Mixture-of-Adapters monocular depth on synthetic scenes.",
                     epilog="Any config key can be given as a flag, e.g. --bins.count 40 or --train.lr=1e-3.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="synthesize a dataset of RGB-D scenes")
    p.add_argument("--count", type=int, default=100, help="number of scenes (default 100)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--out", "--data", dest="out", default="data", help="output directory")
    p.add_argument("--image-size", type=int, default=64, help="square image side (default 64)")

    p = sub.add_parser("train", help="train a model and write metrics, gate stats and a checkpoint")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint", help="checkpoint directory or a run directory containing one")
    p.add_argument("--data", help="dataset directory (defaults to the one in the checkpoint config)")
    p.add_argument("--split", choices=("train", "eval"), default="eval")

    p = sub.add_parser("ablate", help="sweep expert counts, then bin counts")
    _add_config_flags(p)
    p.add_argument("--experts", type=_ints, default=[1, 2, 4, 8], help="expert counts (default 1,2,4,8)")
    p.add_argument("--bins", type=_ints, default=[10, 40, 128], help="bin counts (default 10,40,128)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient path")
    p.add_argument("--preset", choices=("toy", "paper"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=3,
                   help="entries probed per parameter tensor in the full-loss check (default 3)")

    p = sub.add_parser("inspect", help="print a checkpoint's config and parameter counts")
    p.add_argument("checkpoint", help="checkpoint directory or a run directory containing one")
    return parser


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    return p / CHECKPOINT_DIR if (p / CHECKPOINT_DIR / "manifest.txt").exists() else p


def _cmd_generate(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    make_dataset(args.count, args.seed, args.out, image_size=args.image_size)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def _cmd_train(args, extra) -> int:
    config = _resolve_config(args, extra)
    result = train(config)
    print(f"trained {result.steps} steps; artifacts in {config.output_dir}")
    if result.final_eval is not None:
        m = result.final_eval.metrics
        print(f"eval delta1 {m.delta1:.4f} rmse {m.rmse:.4f} absrel {m.absrel:.4f}")
    return EXIT_OK


def _cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    result = evaluate_checkpoint(_checkpoint_dir(args.checkpoint), args.data, args.split)
    for key, value in result.metrics.as_dict().items():
        print(f"{key} {value:.6g}")
    return EXIT_OK


def _cmd_ablate(args, extra) -> int:
    config = _resolve_config(args, extra)
    grid = AblationGrid(experts=tuple(args.experts), bins=tuple(args.bins))
    rows = ablate(config, grid, out_dir=config.output_dir)
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items()))
    print(f"wrote {Path(config.output_dir) / 'ablation.csv'}")
    return EXIT_OK


def _cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    report = run_gradcheck_suite(args.preset, args.seed, args.max_entries)
    for line in report.lines():
        print(line)
    failed = sum(not ok for ok in report.passed.values())
    print(f"{len(report.errors) - failed}/{len(report.errors)} checks passed at rel_tol {report.rel_tol:g}")
    return EXIT_OK if report.ok else EXIT_RUNTIME


def _cmd_inspect(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    model, config = load_checkpoint(_checkpoint_dir(args.checkpoint))
    print(dump_config(config), end="")
    counts = count_params(model)
    print(f"# total {counts.total}")
    print(f"# trainable {counts.trainable} ({counts.trainable_fraction:.4%})")
    for comp, n in counts.breakdown.items():
        print(f"# {comp} {n} (trainable {counts.trainable_breakdown.get(comp, 0)})")
    return EXIT_OK


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval,
            "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck, "inspect": _cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, extra)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (MoADepthError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
