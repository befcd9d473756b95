# cli.py - Command-line entry point for every pipeline stage
# Usage: python cli.py <command> [--config PATH] [--seed N] [--out DIR] [--set key=value ...] [stage flags]
from __future__ import annotations
import argparse
import os
import sys
from typing import Any, Dict, List, Optional

import uvicorn

from config import RUNS_DIR, load_config
from executor import execute_stage
from utils import LabError, dumps

GLOBAL_KEYS = ("command", "config", "seed", "out", "set", "quiet")

# command -> (flag, kwargs) pairs
STAGE_FLAGS: Dict[str, List[tuple]] = {
    "synth": [("--n", {"type": int}), ("--vocab-size", {"type": int})],
    "preprocess": [("--input", {}), ("--input-tgt", {})],
    "split": [("--input", {})],
    "bpe-learn": [("--input", {})],
    "bpe-apply": [("--input", {}), ("--merges", {}), ("--decode", {"action": "store_true"})],
    "train": [("--train", {}), ("--valid", {}), ("--merges", {}), ("--vocab", {})],
    "lora-train": [("--checkpoint", {}), ("--merges", {}), ("--vocab", {}), ("--train", {}), ("--valid", {})],
    "distill": [("--train", {}), ("--mix", {"action": "append"}), ("--merges", {}), ("--vocab", {})],
    "bridge-train": [("--student", {}), ("--merges", {}), ("--vocab", {}), ("--train", {}), ("--valid", {})],
    "translate": [("--checkpoint", {}), ("--student", {}), ("--merges", {}), ("--vocab", {}),
                  ("--input", {}), ("--text", {}), ("--beam", {"type": int})],
    "evaluate": [("--hyp", {}), ("--ref", {}), ("--bench", {"action": "append"}), ("--test", {}),
                 ("--checkpoint", {}), ("--student", {}), ("--merges", {}), ("--vocab", {}),
                 ("--beam", {"type": int})],
    "analyze": [("--checkpoint", {}), ("--merges", {}), ("--vocab", {}),
                ("--inputs", {"action": "append"}), ("--pairs", {})],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: runs/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr_initial=5e-5")
    common.add_argument("--quiet", action="store_true", help="no progress output")

    parser = argparse.ArgumentParser(prog="bamlab", description="Desk-scale low-resource MT laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in STAGE_FLAGS.items():
        p = sub.add_parser(name, parents=[common])
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)

    serve = sub.add_parser("serve", help="start the HTTP translation service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--checkpoint")
    serve.add_argument("--merges")
    serve.add_argument("--vocab")
    return parser


def emit_error(command: str, exc: LabError) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "stage": command, "exit_code": exc.exit_code}
    print(dumps(payload), file=sys.stderr)
    return exc.exit_code


def serve(ns: argparse.Namespace) -> int:
    for flag, env in (("checkpoint", "LAB_CHECKPOINT"), ("merges", "LAB_MERGES"), ("vocab", "LAB_VOCAB")):
        value = getattr(ns, flag)
        if value:
            os.environ[env] = value
    print(f"[CLI] serving on http://{ns.host}:{ns.port}")
    uvicorn.run("app:app", host=ns.host, port=ns.port)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    if ns.command == "serve":
        return serve(ns)

    try:
        cfg = load_config(ns.config, ns.set, ns.seed)
    except LabError as e:
        return emit_error(ns.command, e)

    stage_args: Dict[str, Any] = {k: v for k, v in vars(ns).items() if k not in GLOBAL_KEYS}
    out_dir = ns.out or os.path.join(RUNS_DIR, ns.command)
    state = execute_stage(ns.command, cfg, stage_args, out_dir, verbose=not ns.quiet)
    if state.status != "OK":
        print(dumps(state.error_payload()), file=sys.stderr)
        return state.exit_code
    if not ns.quiet:
        print(f"[CLI] {ns.command} ok -> {os.path.join(out_dir, 'summary.json')}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
