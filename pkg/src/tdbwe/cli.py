"""Command-line entry point: ``tdbwe {prepare,train,extend,evaluate,plot}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdbwe", description="Time-domain bandwidth extension toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="create wide_down audio and a pairing index")
    p.add_argument("--manifest", required=True, help="wideband manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model or the verification backend")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("extend", help="run a trained generator over a manifest")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scheme", choices=pipeline.SCHEMES)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="quality metrics, trial scoring and analysis tables")
    p.add_argument("--config", required=True)
    p.add_argument("--out")

    p = sub.add_parser("plot", help="static figures from an evaluation directory")
    p.add_argument("--reports", required=True)
    p.add_argument("--out")
    return parser


def run(args) -> dict:
    if args.verb == "prepare":
        return pipeline.cmd_prepare(args.manifest, args.out)
    if args.verb == "train":
        return pipeline.cmd_train(pipeline.load_config(args.config), args.out, args.seed)
    if args.verb == "extend":
        cfg = pipeline.load_config(args.config) if args.config else None
        checkpoint = args.checkpoint or (cfg and cfg.resolve(cfg.paths.checkpoint))
        if not checkpoint:
            raise ValueError("extend needs --checkpoint or paths.checkpoint in the config")
        scheme = args.scheme or (cfg.scheme if cfg else "expand_all")
        return pipeline.cmd_extend(checkpoint, args.manifest, scheme, args.out)
    if args.verb == "evaluate":
        return pipeline.cmd_evaluate(pipeline.load_config(args.config), args.out)
    return pipeline.cmd_plot(args.reports, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as exc:  # noqa: BLE001 - top-level error report
        err = {"status": "error", "verb": args.verb, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 2
    print(json.dumps({"status": "ok", "verb": args.verb, "result": result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
