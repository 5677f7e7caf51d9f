#!/usr/bin/env python3
"""
offnadir command-line entry point.

    offnadir datagen --config configs/datagen_desk.json --out data
    offnadir train   --config configs/train_teacher.json --seed 0
    offnadir compare --plan configs/compare_desk.json --out runs/compare
    offnadir report  --in runs/compare --format md

Exit codes: 0 success, 1 failed run (one JSON error line on stderr),
2 usage error.
"""

import json
import sys
from pathlib import Path

from core.router import build_parser, dispatch, output_dir, resolve_config
from utils.hashing import config_hash
from utils.logger import get_logger, run_log

log = get_logger("offnadir")

SNAPSHOT_FILE = "resolved_config.json"


def write_snapshot(out: Path, command: str, seed, cfg: dict, argv) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": command,
        "seed": seed,
        "config": cfg,
        "config_hash": config_hash({"config": cfg, "seed": seed}),
        "argv": list(argv),
    }
    path = out / SNAPSHOT_FILE
    path.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = resolve_config(args)
        if args.command == "report":
            dispatch(args, cfg, None)
            return 0
        out = output_dir(args, cfg)
        write_snapshot(out, args.command, args.seed, cfg, argv)
        with run_log(out):
            log.info("Running %s into %s", args.command, out)
            dispatch(args, cfg, out)
    except Exception as e:
        log.debug("Command failed", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
