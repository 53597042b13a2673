"""Command-line entry point: ``cacp {build-gallery,augment,evaluate,preview}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from cacp.backends import ROLES
from cacp.config import load_config
from cacp.errors import (
    BackendError,
    CacpError,
    ConfigError,
    EmptyGalleryError,
    LayoutMismatchError,
    MalformedAnnotationError,
    UnknownCategoryError,
)
from cacp.pipeline import run_augment, run_build_gallery, run_evaluate, run_preview

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4

PROMPT_MODES = ("box", "box+rand", "box+cam")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--task", choices=("classification", "detection", "segmentation"))
    parser.add_argument("--gallery-dir", type=Path)
    parser.add_argument("--backends", choices=("fake", "real"), help="use this kind for every model role")
    parser.add_argument("--seed", type=int)
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="any dotted config key, e.g. --set composite.feather_px=2",
    )
    parser.add_argument("-v", "--verbose", action="store_true")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--source-dir", type=Path)
    parser.add_argument("--out-dir", type=Path)
    parser.add_argument("--fraction", help="share of images to augment, as 1/N")
    parser.add_argument("--variants", type=int, help="augmented images per selected base image")
    parser.add_argument("--prompt-mode", choices=PROMPT_MODES)
    parser.add_argument("--points", type=int, help="number of saliency points in the prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacp", description="Context-aware copy-paste data augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-gallery", help="index a gallery and compute its object scale ratios")
    _add_common(p)

    p = sub.add_parser("augment", help="write an augmented copy of a dataset")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out-dir")

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--truth-dir", type=Path, required=True)
    p.add_argument("--task", choices=("classification", "detection", "segmentation"), required=True)
    p.add_argument("--output", type=Path, help="TSV report path (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("preview", help="dry run on a single base image")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("image", type=Path)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    values = {}
    flag_keys = {
        "task": "task",
        "gallery_dir": "gallery_dir",
        "source_dir": "source_dir",
        "out_dir": "output_dir",
        "fraction": "fraction",
        "variants": "variants_per_image",
        "prompt_mode": "prompt.mode",
        "points": "prompt.n_points",
        "seed": "seed",
        "workers": "workers",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    if getattr(args, "backends", None):
        for role in ROLES:
            values[f"backends.{role}"] = args.backends
    if getattr(args, "resume", False):
        values["resume"] = True
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, (ConfigError, EmptyGalleryError, LayoutMismatchError, UnknownCategoryError)):
        return EXIT_CONFIG
    if isinstance(exc, (MalformedAnnotationError, OSError)):
        return EXIT_IO
    return EXIT_CONFIG


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "evaluate":
            if args.output:
                with open(args.output, "w", encoding="utf-8") as fh:
                    run_evaluate(args.pred_dir, args.truth_dir, args.task, fh)
            else:
                run_evaluate(args.pred_dir, args.truth_dir, args.task, sys.stdout)
            return EXIT_OK
        config = load_config(args.config, _overrides(args))
        if args.command == "build-gallery":
            index_path, ratio_path = run_build_gallery(config)
            print(f"index\t{index_path}\nratios\t{ratio_path}")
        elif args.command == "augment":
            report = run_augment(config)
            print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
        else:
            out_dir = config.output_dir or Path("cacp-preview")
            for kind, path in run_preview(config, args.image, out_dir).items():
                print(f"{kind}\t{path}")
    except (CacpError, OSError) as exc:
        logging.getLogger("cacp").error("%s", exc)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
