"""Command-line entry point: one subcommand per pipeline stage.

Exit status is 0 on success, 1 when a stage fails (with a diagnostic on
stderr) and 2 for usage errors such as an unknown subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .corpus import ManifestError
from .gateway import GatewayError
from .pipeline import STAGES, ConfigError, Pipeline, StageError, load_config
from .prompting import MODES

logger = logging.getLogger("vcasft")

# flags shared by every stage and the config field each one overrides
_COMMON_FLAGS = {
    "output": "output root for all artifacts",
    "corpus": "input corpus JSONL",
    "assets": "directory image_ref paths are relative to (default: the corpus directory)",
    "fixtures": "replay fixtures JSON",
    "cache": "gateway cache directory (default: OUTPUT/cache)",
    "overrides": "caption overrides JSONL",
    "model": "model label used in reports",
}


def _run_spec(text: str) -> tuple[tuple[str, str], Path]:
    label, sep, path = text.partition("=")
    model, colon, task = label.partition(":")
    if not sep or not colon or not model or not task or not path:
        raise argparse.ArgumentTypeError(f"expected MODEL:TASK=PATH, got {text!r}")
    return (model, task), Path(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcasft", description="Caption-augmented fine-tuning and evaluation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    for name, help_text in _COMMON_FLAGS.items():
        common.add_argument(f"--{name}", help=help_text)
    common.add_argument("--profile", choices=("live", "record", "replay"), help="gateway profile")
    common.add_argument("--mode", choices=MODES, help="prompt mode")
    common.add_argument("--force", action="store_true", help="run even if inputs are unchanged")

    helps = {
        "ingest": "validate, filter and split the corpus",
        "caption": "generate English captions for every image",
        "translate": "translate captions for Hindi records",
        "augment": "expand the train split with CR and Pa candidates",
        "prompts": "render training bundles for the configured mode",
        "train": "fine-tune the backend on the training bundles",
        "infer": "predict every test record",
        "evaluate": "score predictions and write a metric report",
        "report": "render tables and figures from reports or result rows",
    }
    parsers = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in STAGES}

    p = parsers["ingest"]
    p.add_argument("--language", choices=("en", "hi"), help="keep only records in this language")
    p.add_argument("--train-fraction", type=float, help="re-split with this train fraction")
    p.add_argument("--seed", type=int, help="split seed")

    p = parsers["augment"]
    p.add_argument("--review", help="accept/reject patch file from an annotator")

    p = parsers["evaluate"]
    p.add_argument("--judge", dest="judge_profile", choices=("llm", "local"), help="judge profile")
    p.add_argument("--rel-tol", type=float, help="final-answer relative tolerance, within [0.02, 0.03]")

    p = parsers["report"]
    p.add_argument("--run", action="append", type=_run_spec, default=[], metavar="MODEL:TASK=PATH", help="an evaluated report")
    p.add_argument("--qtype-rows", action="append", type=Path, default=[], metavar="CSV", help="per-qtype result rows")
    p.add_argument("--scienceqa", action="append", type=Path, default=[], metavar="CSV", help="per-question correctness rows")
    p.add_argument("--baseline", default="sft", help="task the comparison deltas are taken against")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = [*_COMMON_FLAGS, "profile", "mode", "language", "train_fraction", "seed", "review", "judge_profile", "rel_tol"]
    return {k: getattr(args, k, None) for k in keys}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args.config, _overrides(args))
        pipeline = Pipeline(config, force=args.force)
        if args.command == "report":
            runs = dict(args.run) if args.run else None
            summary = pipeline.report(runs, args.qtype_rows, args.scienceqa, args.baseline)
        else:
            summary = pipeline.run(args.command)
    except (ConfigError, StageError, ManifestError, GatewayError, ValueError, RuntimeError, OSError) as exc:
        print(f"vcasft {args.command}: error: {exc}", file=sys.stderr)
        logger.debug("stage failure", exc_info=True)
        return 1
    print(json.dumps(summary, ensure_ascii=False, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
