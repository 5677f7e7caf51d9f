# core/router.py
from __future__ import annotations

import argparse
from pathlib import Path

import config as _cfg
from utils.hashing import config_hash
from utils.logger import get_logger
from . import commands

log = get_logger(__name__)

CONFIG_COMMANDS = ("datagen", "train", "adapt", "distill", "dml")
PLAN_COMMANDS = ("search", "bench", "compare")


def _feedback(msg: str) -> None:
    if msg:
        log.info(msg)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="single seed every random choice derives from")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override applied after the file (repeatable; last wins)")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offnadir",
        description="Building extraction under off-nadir displacement: datasets, training, transfer, reports.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    for name, help_text in (
        ("datagen", "generate synthetic T/S/Ev datasets, or tile a raster"),
        ("train", "train one model"),
        ("adapt", "fine-tune a pretrained checkpoint on the target data (SDA)"),
        ("distill", "train a student under a frozen teacher (KD)"),
        ("dml", "train two students mutually (DML)"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=True, help="JSON run config")
        _common(p)
        if name == "datagen":
            p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", default="val")
    _common(p)

    for name, help_text in (
        ("search", "optimizer and loss search"),
        ("bench", "benchmark the model roster"),
        ("compare", "baseline / SDA / KD / DML comparison"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--plan", type=Path, required=True, help="JSON experiment plan")
        _common(p)

    p = sub.add_parser("report", help="render a saved report")
    p.add_argument("--in", dest="in_dir", type=Path, required=True, help="directory holding report.json")
    p.add_argument("--format", default="md", choices=["md", "markdown", "csv", "json"])
    p.add_argument("--plot", action="store_true", help="also write summary charts")
    p.add_argument("--check", action="store_true", help="fail unless the comparison orderings hold on Ev")
    p.add_argument("--networks", type=lambda s: tuple(n for n in s.split(",") if n), default=None,
                   help="comma list of networks whose SDA ordering must hold")
    p.add_argument("--out", type=Path, default=None, help="output file")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """File config (if any) with --set overrides applied on top."""
    path = getattr(args, "config", None) or getattr(args, "plan", None)
    cfg = _cfg.load_json_config(path) if path else {}
    return _cfg.apply_overrides(cfg, getattr(args, "overrides", []))


def output_dir(args: argparse.Namespace, cfg: dict) -> Path:
    """--out, else a runs/ folder named after the command and its resolved config."""
    if getattr(args, "out", None) is not None:
        return Path(args.out)
    key = {"config": cfg, "seed": getattr(args, "seed", None)}
    return _cfg.RUNS_DIR / f"{args.command}_{config_hash(key)[:8]}"


def dispatch(args: argparse.Namespace, cfg: dict, out: Path) -> str:
    cmd = args.command
    if cmd == "datagen":
        msg = commands.datagen(cfg, out, seed=args.seed, force=args.force)
    elif cmd == "train":
        msg = commands.train_model(cfg, out, seed=args.seed)
    elif cmd == "adapt":
        msg = commands.adapt(cfg, out, seed=args.seed)
    elif cmd == "distill":
        msg = commands.distill(cfg, out, seed=args.seed)
    elif cmd == "dml":
        msg = commands.dml(cfg, out, seed=args.seed)
    elif cmd == "eval":
        msg = commands.evaluate(args.checkpoint, args.data, out, split=args.split)
    elif cmd == "search":
        msg = commands.search(cfg, out, seed=args.seed)
    elif cmd == "bench":
        msg = commands.bench(cfg, out, seed=args.seed)
    elif cmd == "compare":
        msg = commands.compare(cfg, out, seed=args.seed)
    elif cmd == "report":
        msg = commands.report(args.in_dir, args.format, out=args.out, plot=args.plot,
                              check=args.check, networks=args.networks)
    else:
        raise ValueError(f"unknown command '{cmd}'")
    _feedback(msg)
    return msg
