# harness/experiments.py
"""
Experiment drivers: the optimizer/loss search, the model benchmark, the
knowledge-transfer comparison and stratified evaluation.

Every driver returns an EvalReport whose rows point back at the RunRecord
(by hash) that produced them; run records and checkpoints land under the
output directory, one folder per run.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from torch import nn

from datagen.dataset import DatasetManifest
from datagen.loader import TileDataset
from datagen.scene import STRATA
from losses import DistillConfig, LossConfig, normalize_loss_name
from metrics import TileConfusion, macro_scores, pool, score, write_confusion_csv
from models import ROSTER, build_model, count_params, load_checkpoint, resolve_spec
from state import RunRecord
from trainers.loop import DataBundle, EvalResult, TrainConfig, evaluate, train
from trainers.transfer import DMLWeights, adapt_model, dml_train, kd_distill
from utils.hashing import file_sha256
from utils.logger import get_logger

from .plans import (
    METHODS,
    TEACHER_SETTINGS,
    ExperimentPlan,
    model_entry,
    model_label,
    parse_setting,
    unique_pairs,
)
from .report import METRICS, EvalReport, GainRow, ReportRow, gain_pct, median_rows

log = get_logger(__name__)

ASCENDING = ("params_M", "loss", "ms_per_iter")
RANKED = ("params_M", "loss", "precision", "recall", "iou", "f1", "ms_per_iter")


class Workspace:
    """Resolves a plan's datasets and keeps loaded splits in memory."""

    def __init__(self, plan: ExperimentPlan, out_dir, data_root=None):
        self.plan = plan
        self.out = Path(out_dir)
        self.data_root = data_root
        self._sets: Dict[Tuple[str, str], TileDataset] = {}

    def split(self, role: str, split: str) -> TileDataset:
        key = (role, split)
        if key not in self._sets:
            root = self.plan.dataset_root(role, self.data_root)
            self._sets[key] = TileDataset(DatasetManifest.load(root), split, for_training=split == "train")
        return self._sets[key]

    def bundle(self, setting: str) -> DataBundle:
        train_role, val_role = parse_setting(setting)
        return DataBundle(train=self.split(train_role, "train"), val=self.split(val_role, "val"))

    def val_for(self, setting: str) -> TileDataset:
        return self.split(parse_setting(setting)[1], "val")

    def run_dir(self, *parts) -> Path:
        return self.out.joinpath(*[str(p) for p in parts])


def train_config(plan: ExperimentPlan, role: str, seed: int, **overrides) -> TrainConfig:
    base = plan.teacher_train if role == "teacher" else plan.train
    return TrainConfig.for_role(role, **{**base, **overrides, "seed": int(seed)})


def strata_f1(tiles: Sequence[TileConfusion]) -> Optional[Dict[str, float]]:
    """Pooled F1 per height stratum; None when no tile carries a stratum."""
    groups: Dict[str, List[TileConfusion]] = {}
    for t in tiles:
        if t.stratum:
            groups.setdefault(t.stratum, []).append(t)
    if not groups:
        return None
    order = [s for s in STRATA if s in groups] + sorted(s for s in groups if s not in STRATA)
    return {s: score(pool(t.counts for t in groups[s])).f1 for s in order}


def row_from(network: str, setting: str, method: str, seed: int, model: nn.Module,
             record: RunRecord, ev: EvalResult, **extra) -> ReportRow:
    s, m = ev.scores, ev.macro
    return ReportRow(
        network=network,
        setting=setting,
        method=method,
        seed=seed,
        params_M=count_params(model) / 1e6,
        loss=ev.loss,
        precision=s.precision,
        recall=s.recall,
        iou=s.iou,
        f1=s.f1,
        macro_precision=m.precision,
        macro_recall=m.recall,
        macro_iou=m.iou,
        macro_f1=m.f1,
        ms_per_iter=record.ms_per_iter,
        best_epoch=record.best_epoch,
        use_attention=model.spec.use_attention,
        counts=ev.counts.to_dict(),
        strata_f1=strata_f1(ev.tiles),
        record_hash=record.record_hash(),
        **extra,
    )


def _evaluate_on(model, dataset: TileDataset, cfg: TrainConfig) -> EvalResult:
    return evaluate(model, dataset, cfg.loss, cfg.batch_size, cfg.threshold, cfg.resolved_device)


# ---- Optimizer and loss search ---------------------------------------------


def pick_winner(rows: Sequence[ReportRow]) -> ReportRow:
    """Highest F1; ties go to the lower loss, then the earlier converging epoch."""
    return sorted(rows, key=lambda r: (-r.f1, r.loss, r.best_epoch))[0]


def run_hparam_search(plan: ExperimentPlan, out_dir, data_root=None) -> EvalReport:
    ws = Workspace(plan, out_dir, data_root)
    setting = plan.settings[0]
    data = ws.bundle(setting)
    label = model_label(plan.model)
    spec = resolve_spec(model_entry(plan.model), plan.tile_size)
    seed = plan.seeds[0]

    def run(optimizer: str, loss_name: str) -> ReportRow:
        cfg = train_config(plan, "student", seed, optimizer=optimizer, loss=loss_name)
        model = build_model(spec, seed)
        record = train(model, data, cfg, name=f"{label}_{optimizer}_{loss_name}",
                       run_dir=ws.run_dir("hparam", optimizer, loss_name))
        return row_from(label, setting, "hparam", seed, model, record, _evaluate_on(model, data.val, cfg),
                        optimizer=optimizer, loss_name=loss_name)

    opt_rows = [run(opt, "total") for opt in plan.optimizers]
    winner = pick_winner(opt_rows)
    log.info("Optimizer search winner: %s (F1 %.3f)", winner.optimizer, winner.f1)

    loss_rows = []
    for name in plan.losses:
        name = normalize_loss_name(name)
        if name == "total":
            loss_rows.append(dataclasses.replace(winner, ranks={}))
        else:
            loss_rows.append(run(winner.optimizer, name))

    return EvalReport(
        title=f"Optimizer and loss search ({label}, {setting})",
        kind="hparam",
        rows=opt_rows + loss_rows,
        provenance={
            "plan": plan.to_dict(),
            "winner_optimizer": winner.optimizer,
            "reused_row": {"optimizer": winner.optimizer, "loss_name": "total", "record_hash": winner.record_hash},
        },
    )


# ---- Model benchmark --------------------------------------------------------


def mark_top3(rows: List[ReportRow], columns: Sequence[str] = RANKED) -> None:
    for col in columns:
        present = [r for r in rows if getattr(r, col) is not None]
        ordered = sorted(present, key=lambda r: getattr(r, col), reverse=col not in ASCENDING)
        for rank, r in enumerate(ordered[:3], start=1):
            r.ranks[col] = rank


def best_row(rows: Sequence[ReportRow]) -> ReportRow:
    """F1, then IoU, then fewer parameters."""
    return sorted(rows, key=lambda r: (-r.f1, -r.iou, r.params_M))[0]


def run_model_bench(plan: ExperimentPlan, out_dir, data_root=None) -> EvalReport:
    ws = Workspace(plan, out_dir, data_root)
    setting = plan.settings[0]
    data = ws.bundle(setting)
    roster = plan.roster or tuple(ROSTER)
    seed = plan.seeds[0]

    rows = []
    for entry in roster:
        label = model_label(entry)
        spec = resolve_spec(model_entry(entry), plan.tile_size)
        cfg = train_config(plan, "student", seed)
        model = build_model(spec, seed)
        record = train(model, data, cfg, name=label, run_dir=ws.run_dir("bench", label))
        rows.append(row_from(label, setting, "bench", seed, model, record, _evaluate_on(model, data.val, cfg)))
    mark_top3(rows)
    best = best_row(rows)
    return EvalReport(
        title=f"Model benchmark ({setting})",
        kind="bench",
        rows=rows,
        provenance={"plan": plan.to_dict(), "best": best.network},
    )


# ---- Knowledge transfer comparison ------------------------------------------


def compute_gains(rows: Sequence[ReportRow], settings: Sequence[str]) -> List[GainRow]:
    """SDA vs baseline per (network, setting, metric), on seed medians."""
    med = {(r.method, r.network, r.setting): r for r in median_rows(rows)}
    gains = []
    networks = list(OrderedDict.fromkeys(r.network for r in rows if r.method == "sda"))
    for network in networks:
        for setting in settings:
            base = med.get(("baseline", network, setting))
            sda = med.get(("sda", network, setting))
            if base is None or sda is None:
                continue
            for metric in METRICS:
                b, v = getattr(base, metric), getattr(sda, metric)
                gains.append(GainRow(network, setting, metric, b, v, gain_pct(b, v)))
    return gains


def run_transfer_comparison(plan: ExperimentPlan, out_dir, data_root=None) -> EvalReport:
    """
    Per seed: pretrain every network on T (the teacher block, evaluated in
    T-T / T-S / T-Ev), then the baseline, SDA, KD and DML blocks trained on S
    and evaluated in every S-* setting of the plan.
    """
    ws = Workspace(plan, out_dir, data_root)
    eval_settings = [s for s in plan.settings if parse_setting(s)[0] == "S"]
    if not eval_settings:
        raise ValueError("the comparison needs at least one S-* setting")
    s_data = ws.bundle("S-S")
    t_data = ws.bundle("T-T")

    teacher_label = model_label(plan.teacher)
    teacher_spec = resolve_spec(model_entry(plan.teacher), plan.tile_size)
    students = [(model_label(e), resolve_spec(model_entry(e), plan.tile_size)) for e in plan.students]
    networks = [(teacher_label, teacher_spec, "teacher")] + [(lbl, spec, "student") for lbl, spec in students]
    dcfg = DistillConfig.from_dict(plan.distill)
    dml_cfg = dict(plan.dml)

    rows: List[ReportRow] = []

    def add_rows(label, method, seed, model, record, cfg, settings, **extra):
        for setting in settings:
            ev = _evaluate_on(model, ws.val_for(setting), cfg)
            rows.append(row_from(label, setting, method, seed, model, record, ev, **extra))

    for seed in plan.seeds:
        base_dir = ws.run_dir(f"seed{seed}")
        pretrained: Dict[str, str] = {}
        for label, spec, role in networks:
            if role == "student" and "sda" not in plan.methods:
                continue
            cfg = train_config(plan, role, seed)
            model = build_model(spec, seed)
            record = train(model, t_data, cfg, name=f"{label}_pretrain", run_dir=base_dir / label / "pretrain")
            pretrained[label] = record.checkpoint
            add_rows(label, "pretrain", seed, model, record, cfg, TEACHER_SETTINGS)

        baselines: Dict[str, str] = {}
        if "baseline" in plan.methods:
            for label, spec, role in networks:
                cfg = train_config(plan, role, seed)
                model = build_model(spec, seed)
                record = train(model, s_data, cfg, name=f"{label}_baseline", run_dir=base_dir / label / "baseline")
                baselines[label] = record.checkpoint
                add_rows(label, "baseline", seed, model, record, cfg, eval_settings)

        if "sda" in plan.methods:
            for label, spec, role in networks:
                cfg = train_config(plan, role, seed)
                model, record = adapt_model(pretrained[label], s_data, cfg, expected_spec=spec,
                                            name=f"{label}_sda", run_dir=base_dir / label / "sda")
                add_rows(label, "sda", seed, model, record, cfg, eval_settings)

        if "kd" in plan.methods:
            for label, spec in students:
                cfg = train_config(plan, "student", seed)
                student = build_model(spec, seed)
                init = baselines.get(label) if plan.init_from_baseline else None
                record = kd_distill(pretrained[teacher_label], student, s_data, cfg, dcfg, name=f"{label}_kd",
                                    run_dir=base_dir / label / "kd", init_checkpoint=init)
                add_rows(label, "kd", seed, student, record, cfg, eval_settings,
                         par_red_pct=record.provenance["par_red_pct"])

        if "dml" in plan.methods:
            if len(students) < 2:
                log.warning("DML needs two students; plan lists %d, skipping", len(students))
            cfg = train_config(plan, "student", seed)
            weights = DMLWeights.from_value(dml_cfg.get("weights", DMLWeights()))
            use_teacher = bool(dml_cfg.get("use_teacher", True))
            for i, j in unique_pairs(students):
                (la, sa), (lb, sb) = students[i], students[j]
                pair = (build_model(sa, seed), build_model(sb, seed + 1))
                inits = (
                    (baselines.get(la), baselines.get(lb)) if plan.init_from_baseline else None
                )
                ra, rb = dml_train(
                    pair, s_data, cfg, weights,
                    teacher_ckpt=pretrained[teacher_label] if use_teacher else None,
                    dcfg=dcfg,
                    mode=dml_cfg.get("mode", "simultaneous"),
                    names=(f"{la}_dml_{lb}", f"{lb}_dml_{la}"),
                    run_dirs=(base_dir / f"dml_{la}_{lb}" / la, base_dir / f"dml_{la}_{lb}" / lb),
                    init_checkpoints=inits,
                )
                for label, peer, model, record in ((la, lb, pair[0], ra), (lb, la, pair[1], rb)):
                    add_rows(f"{label} (+{peer})", "dml", seed, model, record, cfg, eval_settings,
                             par_red_pct=record.provenance.get("par_red_pct"))

    return EvalReport(
        title="Knowledge transfer comparison",
        kind="compare",
        rows=rows,
        gains=compute_gains(rows, eval_settings),
        provenance={"plan": plan.to_dict(), "methods": [m for m in METHODS if m in plan.methods]},
    )


# ---- Stratified evaluation --------------------------------------------------


def _group_row(network: str, setting: str, stratum: str, gsd_cm: Optional[int],
               tiles: List[TileConfusion], record_hash: Optional[str]) -> ReportRow:
    counts = pool(t.counts for t in tiles)
    s = score(counts)
    m = macro_scores(t.counts for t in tiles)
    return ReportRow(
        network=network,
        setting=setting,
        method="stratified",
        precision=s.precision,
        recall=s.recall,
        iou=s.iou,
        f1=s.f1,
        macro_precision=m.precision,
        macro_recall=m.recall,
        macro_iou=m.iou,
        macro_f1=m.f1,
        stratum=stratum,
        gsd_cm=gsd_cm,
        tiles=len(tiles),
        counts=counts.to_dict(),
        record_hash=record_hash,
    )


def stratified_report(tiles: Sequence[TileConfusion], network: str, setting: str = "Ev",
                      record_hash: Optional[str] = None) -> EvalReport:
    """
    Rows per (stratum, gsd) cell, per-stratum and per-gsd marginals and the
    pooled total. Marginals pool the counts of the cells they cover.
    """
    present = {t.stratum or "unknown" for t in tiles}
    for s in STRATA:
        if s not in present:
            log.warning("Stratum %s has no tiles in the evaluation set; row omitted", s)
    order = [s for s in STRATA if s in present] + sorted(present - set(STRATA))
    gsds = sorted({t.gsd_cm for t in tiles if t.gsd_cm is not None})

    def pick(stratum=None, gsd=None):
        return [
            t for t in tiles
            if (stratum is None or (t.stratum or "unknown") == stratum) and (gsd is None or t.gsd_cm == gsd)
        ]

    rows = []
    for stratum in order:
        for gsd in gsds:
            cell = pick(stratum, gsd)
            if cell:
                rows.append(_group_row(network, setting, stratum, gsd, cell, record_hash))
        rows.append(_group_row(network, setting, stratum, None, pick(stratum), record_hash))
    for gsd in gsds:
        rows.append(_group_row(network, setting, "all", gsd, pick(gsd=gsd), record_hash))
    rows.append(_group_row(network, setting, "all", None, list(tiles), record_hash))
    return EvalReport(title=f"Stratified evaluation ({network})", kind="stratified", rows=rows)


def _record_hash_near(ckpt: Path) -> Optional[str]:
    record_path = ckpt.parent / "record.json"
    if record_path.exists():
        return RunRecord.load(record_path).record_hash()
    return None


def stratified_eval(model_ckpt, eval_root, network: Optional[str] = None, out_dir=None,
                    batch_size: int = 8, device: Optional[str] = None) -> EvalReport:
    """Evaluate a checkpoint on an Ev-style dataset, grouped by stratum and gsd."""
    ckpt = Path(model_ckpt)
    model, _ = load_checkpoint(ckpt, device)
    manifest = DatasetManifest.load(eval_root)
    if not any(t.stratum for t in manifest.tiles):
        raise ValueError(f"{eval_root} carries no strata")
    dataset = TileDataset(manifest, "val")
    ev = evaluate(model, dataset, LossConfig(), batch_size, device=device or None)
    if out_dir is not None:
        write_confusion_csv(Path(out_dir) / "confusion.csv", ev.tiles)
    report = stratified_report(ev.tiles, network or ckpt.parent.name, manifest.role, _record_hash_near(ckpt))
    report.provenance = {"checkpoint": str(ckpt), "checkpoint_sha256": file_sha256(ckpt), "dataset": str(eval_root)}
    return report


def evaluate_checkpoint(model_ckpt, dataset_root, split: str = "val", out_dir=None,
                        batch_size: int = 8, device: Optional[str] = None) -> EvalReport:
    """One pooled + macro row for a checkpoint on a dataset split, plus per-tile counts."""
    ckpt = Path(model_ckpt)
    model, _ = load_checkpoint(ckpt, device)
    manifest = DatasetManifest.load(dataset_root)
    dataset = TileDataset(manifest, split)
    ev = evaluate(model, dataset, LossConfig(), batch_size, device=device or None)
    if out_dir is not None:
        write_confusion_csv(Path(out_dir) / "confusion.csv", ev.tiles)
    s, m = ev.scores, ev.macro
    row = ReportRow(
        network=ckpt.parent.name,
        setting=f"{manifest.role}:{split}",
        method="eval",
        params_M=count_params(model) / 1e6,
        loss=ev.loss,
        precision=s.precision,
        recall=s.recall,
        iou=s.iou,
        f1=s.f1,
        macro_precision=m.precision,
        macro_recall=m.recall,
        macro_iou=m.iou,
        macro_f1=m.f1,
        use_attention=model.spec.use_attention,
        tiles=len(dataset),
        counts=ev.counts.to_dict(),
        record_hash=_record_hash_near(ckpt),
    )
    return EvalReport(
        title=f"Evaluation of {ckpt.name} on {manifest.role}/{split}",
        kind="eval",
        rows=[row],
        provenance={"checkpoint": str(ckpt), "checkpoint_sha256": file_sha256(ckpt), "dataset": str(dataset_root)},
    )
