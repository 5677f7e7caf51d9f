# core/commands.py
"""
Thin command functions behind the CLI. Each takes the resolved config for
its subcommand plus the output directory and returns a one-line summary;
artifacts go to files under `out`.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from datagen import DatagenConfig, DatasetManifest, build_dataset, misalignment_stats, tile_raster
from harness import (
    EvalReport,
    ExperimentPlan,
    check_orderings,
    emit_report,
    evaluate_checkpoint,
    run_hparam_search,
    run_model_bench,
    run_transfer_comparison,
    stratified_eval,
)
from harness.plans import model_entry, model_label
from losses import DistillConfig
from models import build_model, resolve_spec
from trainers import DataBundle, DMLWeights, TrainConfig, dml_train, kd_distill, sda_adapt, train
from utils.logger import get_logger

log = get_logger(__name__)

REPORT_FILE = "report.json"


# ---- Helpers ----------------------------------------------------------------


def _data(cfg: dict) -> DataBundle:
    """
    Datasets for a single run: explicit `train_data` / `val_data` roots, or a
    `setting` resolved against `datasets` the way plans resolve it.
    """
    if "train_data" in cfg:
        return DataBundle.from_dirs(cfg["train_data"], cfg.get("val_data"), limit=cfg.get("limit"))
    plan = ExperimentPlan(datasets=cfg.get("datasets", {"T": "T", "S": "S", "Ev": "Ev"}))
    train_root, val_root = plan.setting_roots(cfg.get("setting", "S-S"), cfg.get("data_root"))
    return DataBundle.from_dirs(train_root, val_root, limit=cfg.get("limit"))


def _train_cfg(cfg: dict, seed: Optional[int], role: str = "student") -> TrainConfig:
    values = dict(cfg.get("train", {}))
    if seed is not None:
        values["seed"] = seed
    return TrainConfig.for_role(cfg.get("role", role), **values)


def _write_report(report: EvalReport, out: Path) -> Path:
    emit_report(report, out / "report.md", "md")
    return emit_report(report, out / REPORT_FILE, "json")


def _plan(cfg: dict, seed: Optional[int]) -> ExperimentPlan:
    plan = ExperimentPlan.from_dict(cfg)
    if seed is not None:
        plan.seeds = (int(seed),)
    return plan


# ---- Datasets ---------------------------------------------------------------


def datagen(cfg: dict, out: Path, seed: Optional[int] = None, force: bool = False) -> str:
    """Synthetic T/S/Ev datasets, or tiles cut from a user raster when `source` is given."""
    source = cfg.get("source")
    if source:
        manifest = tile_raster(
            source["raster"],
            source["polygons"],
            float(source["gsd_m"]),
            out,
            tile_size=int(cfg.get("tile_size", 256)),
            split=source.get("split", "train"),
            label_kind=source.get("label_kind", "noisy"),
            height_field=source.get("height_field"),
            force=force,
        )
        return f"Tiled {len(manifest.tiles)} tiles into {out}"

    if seed is not None:
        cfg = {**cfg, "seed": seed}
    manifests = build_dataset(DatagenConfig.from_dict(cfg), out, force=force)
    for manifest in manifests.values():
        rows = misalignment_stats(manifest)
        path = Path(manifest.root) / "misalignment.json"
        path.write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n", encoding="utf-8")
    counts = ", ".join(f"{role}={len(m.tiles)}" for role, m in manifests.items())
    return f"Generated datasets under {out} ({counts})"


# ---- Training ---------------------------------------------------------------


def train_model(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    tcfg = _train_cfg(cfg, seed)
    entry = cfg.get("model", "student_mbconv")
    spec = resolve_spec(model_entry(entry), int(cfg.get("tile_size", 256)))
    model = build_model(spec, tcfg.seed)
    record = train(model, _data(cfg), tcfg, name=model_label(entry), run_dir=out)
    return f"Trained {record.name}: best epoch {record.best_epoch}, val IoU {record.best.iou:.3f}"


def adapt(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    if "checkpoint" not in cfg:
        raise ValueError("adapt needs a 'checkpoint' to start from")
    record = sda_adapt(cfg["checkpoint"], _data(cfg), _train_cfg(cfg, seed), name=cfg.get("name", "sda"), run_dir=out)
    return f"Adapted {cfg['checkpoint']}: best epoch {record.best_epoch}, val IoU {record.best.iou:.3f}"


def distill(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    if "teacher_checkpoint" not in cfg:
        raise ValueError("distill needs a 'teacher_checkpoint'")
    tcfg = _train_cfg(cfg, seed)
    entry = cfg.get("student", "student_mbconv")
    student = build_model(resolve_spec(model_entry(entry), int(cfg.get("tile_size", 256))), tcfg.seed)
    record = kd_distill(
        cfg["teacher_checkpoint"],
        student,
        _data(cfg),
        tcfg,
        DistillConfig.from_dict(cfg.get("distill", {})),
        name=model_label(entry),
        run_dir=out,
        init_checkpoint=cfg.get("init_checkpoint"),
    )
    return (
        f"Distilled into {record.name}: best epoch {record.best_epoch}, "
        f"val IoU {record.best.iou:.3f}, {record.provenance['par_red_pct']:.1f}% fewer parameters"
    )


def dml(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    entries = cfg.get("students", [])
    if len(entries) != 2:
        raise ValueError(f"dml needs exactly two 'students', got {len(entries)}")
    tcfg = _train_cfg(cfg, seed)
    tile_size = int(cfg.get("tile_size", 256))
    names = tuple(model_label(e) for e in entries)
    if names[0] == names[1]:
        names = (f"{names[0]}_a", f"{names[1]}_b")
    students = [build_model(resolve_spec(model_entry(e), tile_size), tcfg.seed + k) for k, e in enumerate(entries)]
    ra, rb = dml_train(
        students,
        _data(cfg),
        tcfg,
        DMLWeights.from_value(cfg.get("weights", {})),
        teacher_ckpt=cfg.get("teacher_checkpoint"),
        dcfg=DistillConfig.from_dict(cfg.get("distill", {})),
        mode=cfg.get("mode", "simultaneous"),
        names=names,
        run_dirs=(out / names[0], out / names[1]),
        init_checkpoints=tuple(cfg["init_checkpoints"]) if cfg.get("init_checkpoints") else None,
    )
    return f"DML done: {ra.name} IoU {ra.best.iou:.3f}, {rb.name} IoU {rb.best.iou:.3f}"


# ---- Evaluation & harness ---------------------------------------------------


def evaluate(checkpoint, data, out: Path, split: str = "val") -> str:
    report = evaluate_checkpoint(checkpoint, data, split, out_dir=out)
    _write_report(report, out)
    row = report.rows[0]
    msg = f"{report.title}: P {row.precision:.3f} R {row.recall:.3f} IoU {row.iou:.3f} F1 {row.f1:.3f}"
    manifest = DatasetManifest.load(data)
    if split == "val" and any(t.stratum for t in manifest.tiles):
        strat = stratified_eval(checkpoint, data, out_dir=out / "stratified")
        _write_report(strat, out / "stratified")
        msg += f"; stratified report in {out / 'stratified'}"
    return msg


def search(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    report = run_hparam_search(_plan(cfg, seed), out)
    path = _write_report(report, out)
    return f"Search done, winner {report.provenance['winner_optimizer']}; report at {path}"


def bench(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    report = run_model_bench(_plan(cfg, seed), out)
    path = _write_report(report, out)
    return f"Benchmark done, best {report.provenance['best']}; report at {path}"


def compare(cfg: dict, out: Path, seed: Optional[int] = None) -> str:
    report = run_transfer_comparison(_plan(cfg, seed), out)
    path = _write_report(report, out)
    return f"Comparison done ({len(report.rows)} rows); report at {path}"


def report(in_dir, fmt: str = "md", out=None, plot: bool = False, check: bool = False,
           networks=None) -> str:
    in_dir = Path(in_dir)
    loaded = EvalReport.load(in_dir / REPORT_FILE)
    suffix = "md" if fmt in ("md", "markdown") else fmt
    path = emit_report(loaded, Path(out) if out else in_dir / f"report.{suffix}", fmt, plot=plot)
    if not check:
        return f"Wrote {path}"
    checks = check_orderings(loaded, networks=networks)
    return f"Wrote {path}; {len(checks)} ordering checks passed"
