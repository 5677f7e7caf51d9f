# trainers/transfer.py
"""
Knowledge transfer on top of the supervised loop:

- sda_adapt: fine-tune every layer of a pretrained model on the target data
- kd_distill: train a student under a frozen teacher's feature pyramid
- dml_train: two students learning from the labels and from each other,
  optionally also distilled from a teacher
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from tqdm import tqdm

from losses import DistillConfig, FeatureProjector, combined_loss, distillation_loss, mutual_loss
from models.unet import count_params, freeze, load_checkpoint
from state import PlateauState, RunRecord
from utils.hashing import file_sha256
from utils.logger import get_logger

from .loop import (
    BestKeeper,
    DataBundle,
    TrainConfig,
    diverged,
    epoch_log,
    evaluate,
    fit,
    make_loader,
    median_ms,
    new_record,
)
from .optim import make_optimizer, plateau_step, set_lr

log = get_logger(__name__)

DML_MODES = ("simultaneous", "alternating")


def _source(ckpt) -> dict:
    return {"path": str(ckpt), "sha256": file_sha256(ckpt)}


def par_reduction_pct(student_params: int, teacher_params: int) -> float:
    return 100.0 * (1.0 - student_params / teacher_params)


def load_teacher(teacher_ckpt, device: str) -> nn.Module:
    teacher, _ = load_checkpoint(teacher_ckpt, device)
    teacher.eval()
    return freeze(teacher)


def build_projector(student: nn.Module, teacher: nn.Module, seed: int, device: str) -> FeatureProjector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) + 1)
        projector = FeatureProjector(student.encoder.out_channels, teacher.encoder.out_channels)
    return projector.to(device)


def init_from(model: nn.Module, ckpt) -> None:
    """Load another run's weights into `model` (same spec required)."""
    source, _ = load_checkpoint(ckpt, "cpu")
    if source.spec != model.spec:
        raise ValueError(f"checkpoint {ckpt} holds a different model spec")
    model.load_state_dict(source.state_dict())


# ---- SDA --------------------------------------------------------------------


def sda_adapt(pretrained_ckpt, data: DataBundle, cfg: TrainConfig, expected_spec=None,
              name: str = "sda", run_dir=None) -> RunRecord:
    """
    Fine-tune all layers of a pretrained checkpoint on the target dataset.
    The architecture never changes: a differing expected_spec is rejected.
    """
    return adapt_model(pretrained_ckpt, data, cfg, expected_spec, name, run_dir)[1]


def adapt_model(pretrained_ckpt, data: DataBundle, cfg: TrainConfig, expected_spec=None,
                name: str = "sda", run_dir=None) -> Tuple[nn.Module, RunRecord]:
    """sda_adapt, also handing back the adapted model (holding its best-epoch weights)."""
    model, meta = load_checkpoint(pretrained_ckpt, cfg.resolved_device)
    if expected_spec is not None and expected_spec != model.spec:
        raise ValueError(
            f"SDA keeps the architecture: checkpoint spec {model.spec.to_dict()} "
            f"!= requested {expected_spec.to_dict()}"
        )
    freeze(model, frozen=False)
    record = new_record(name, "sda", model, cfg, data, source=_source(pretrained_ckpt), source_seed=meta.get("seed"))

    def loss_fn(images, masks):
        return combined_loss(cfg.loss, model(images), masks)

    fit(model, data, cfg, record, loss_fn, run_dir=run_dir)
    return model, record


# ---- KD ---------------------------------------------------------------------


def kd_distill(teacher_ckpt, student: nn.Module, data: DataBundle, cfg: TrainConfig,
               dcfg: DistillConfig = None, name: str = "kd", run_dir=None,
               init_checkpoint=None) -> RunRecord:
    """
    Train `student` with alpha * supervised + (1 - alpha) * feature distillation.

    alpha = 1 leaves the distillation term, and the projector, out entirely.
    """
    dcfg = dcfg or DistillConfig()
    device = cfg.resolved_device
    if init_checkpoint is not None:
        init_from(student, init_checkpoint)
    teacher = load_teacher(teacher_ckpt, device)
    student.to(device)

    record = new_record(
        name, "kd", student, cfg, data,
        teacher=_source(teacher_ckpt),
        distill=dcfg.to_dict(),
        init_checkpoint=str(init_checkpoint) if init_checkpoint else None,
        par_red_pct=par_reduction_pct(count_params(student), count_params(teacher)),
    )

    projector = None
    if dcfg.alpha < 1.0:
        projector = build_projector(student, teacher, cfg.seed, device)
        record.provenance["initial_distillation"] = _initial_distillation(student, teacher, projector, data, dcfg, device)

    def loss_fn(images, masks):
        probs, s_pyr = student.forward_features(images)
        sup = combined_loss(cfg.loss, probs, masks)
        if projector is None:
            return sup
        with torch.no_grad():
            t_pyr = teacher.encode(images)
        return dcfg.alpha * sup + (1.0 - dcfg.alpha) * distillation_loss(s_pyr, t_pyr, dcfg, projector)

    extra = list(projector.parameters()) if projector is not None else []
    fit(student, data, cfg, record, loss_fn, extra_params=extra, run_dir=run_dir)
    return record


def _initial_distillation(student, teacher, projector, data: DataBundle, dcfg: DistillConfig, device: str) -> float:
    """Distillation term on the first training batch, both networks in eval mode."""
    dataset = data.train if data.train is not None and len(data.train) else data.val
    images = torch.stack([dataset[i][0] for i in range(min(4, len(dataset)))]).to(device)
    was_training = student.training
    student.eval()
    with torch.no_grad():
        value = float(distillation_loss(student.encode(images), teacher.encode(images), dcfg, projector))
    student.train(was_training)
    return value


# ---- DML --------------------------------------------------------------------


@dataclass(frozen=True)
class DMLWeights:
    sup: float = 1.0
    mut: float = 0.5
    kd: float = 0.5

    def __post_init__(self):
        if min(self.sup, self.mut, self.kd) < 0:
            raise ValueError(f"DML weights must be >= 0, got {self}")

    @classmethod
    def from_value(cls, value) -> "DMLWeights":
        if isinstance(value, DMLWeights):
            return value
        if isinstance(value, dict):
            return cls(**{k: float(v) for k, v in value.items() if k in cls.__dataclass_fields__})
        if isinstance(value, (list, tuple)) and len(value) == 3:
            return cls(*(float(v) for v in value))
        raise ValueError(f"cannot read DML weights from {value!r}")


class _Peer:
    """Per-student training state inside a DML run."""

    def __init__(self, model, record, cfg: TrainConfig, run_dir, projector):
        self.model = model
        self.record = record
        self.projector = projector
        params = [p for p in model.parameters() if p.requires_grad]
        if projector is not None:
            params += list(projector.parameters())
        self.optimizer, record.optimizer = make_optimizer(cfg.optimizer, params, cfg.lr)
        self.plateau = PlateauState(lr=cfg.lr, factor=cfg.plateau.factor, patience=cfg.plateau.patience)
        self.lr = cfg.lr
        self.keeper = BestKeeper(model, Path(run_dir) if run_dir else None, cfg.seed, record.config.get("config_hash"))
        self.run_dir = Path(run_dir) if run_dir else None
        self.loss_sum = 0.0


def dml_train(
    students: Sequence[nn.Module],
    data: DataBundle,
    cfg: TrainConfig,
    weights: DMLWeights = None,
    teacher_ckpt=None,
    dcfg: DistillConfig = None,
    mode: str = "simultaneous",
    names: Tuple[str, str] = ("dml_a", "dml_b"),
    run_dirs: Optional[Tuple] = None,
    init_checkpoints: Optional[Tuple] = None,
) -> Tuple[RunRecord, RunRecord]:
    """
    Deep mutual learning for exactly two students.

    Each student minimizes sup * L_sup + mut * mutual(own, peer.detach())
    + kd * distillation(own pyramid, teacher pyramid). Terms with weight 0
    (or kd without a teacher) are skipped. In "alternating" mode student B's
    update sees A's prediction after A's step.
    """
    if len(students) != 2:
        raise ValueError(f"DML trains exactly two students at a time, got {len(students)}")
    if mode not in DML_MODES:
        raise ValueError(f"mode must be one of {DML_MODES}, got '{mode}'")
    if data.train is None:
        raise ValueError("training needs a train split")
    weights = DMLWeights.from_value(weights or DMLWeights())
    dcfg = dcfg or DistillConfig()
    device = cfg.resolved_device
    run_dirs = run_dirs or (None, None)
    init_checkpoints = init_checkpoints or (None, None)

    torch.manual_seed(int(cfg.seed))
    for model, init in zip(students, init_checkpoints):
        if init is not None:
            init_from(model, init)
        model.to(device)

    teacher = None
    use_kd = weights.kd > 0 and teacher_ckpt is not None
    if use_kd:
        teacher = load_teacher(teacher_ckpt, device)

    peers: List[_Peer] = []
    for k, (model, name, run_dir) in enumerate(zip(students, names, run_dirs)):
        record = new_record(
            name, "dml", model, cfg, data,
            peer=names[1 - k],
            weights=asdict(weights),
            mode=mode,
            teacher=_source(teacher_ckpt) if teacher_ckpt is not None else None,
            distill=dcfg.to_dict() if use_kd else None,
            init_checkpoint=str(init_checkpoints[k]) if init_checkpoints[k] else None,
        )
        if teacher is not None:
            record.provenance["par_red_pct"] = par_reduction_pct(count_params(model), count_params(teacher))
        projector = build_projector(model, teacher, cfg.seed + k, device) if use_kd else None
        peers.append(_Peer(model, record, cfg, run_dir, projector))

    def objective(peer: _Peer, probs, pyr, peer_probs, masks, t_pyr):
        loss = weights.sup * combined_loss(cfg.loss, probs, masks)
        if weights.mut > 0:
            loss = loss + weights.mut * mutual_loss(probs, peer_probs.detach())
        if t_pyr is not None:
            loss = loss + weights.kd * distillation_loss(pyr, t_pyr, dcfg, peer.projector)
        return loss

    def step(peer: _Peer, loss, epoch, it):
        value = float(loss.detach())
        if not math.isfinite(value):
            raise diverged(peer.record, peer.run_dir, epoch, it, value)
        peer.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        peer.optimizer.step()
        return value

    def evaluate_all(epoch, train_losses, ms):
        for peer, tl in zip(peers, train_losses):
            ev = evaluate(peer.model, data.val, cfg.loss, cfg.batch_size, cfg.threshold, device)
            if peer.record.remember_epoch(epoch_log(epoch, tl, ev, peer.lr, ms)):
                peer.keeper.keep(epoch)
            if epoch > 0 and cfg.plateau.enabled:
                new_lr = plateau_step(peer.plateau, ev.scores.iou)
                if new_lr != peer.lr:
                    log.info("%s: val IoU plateau, lr %.1e -> %.1e", peer.record.name, peer.lr, new_lr)
                    peer.lr = new_lr
                    set_lr(peer.optimizer, new_lr)

    evaluate_all(0, [None, None], None)
    a, b = peers
    loader = make_loader(data.train, cfg) if cfg.epochs > 0 else None
    times_ms: List[float] = []
    it = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="+".join(names), leave=False, disable=None):
        for p in peers:
            p.model.train()
            p.loss_sum = 0.0
        seen = 0
        for images, masks, _ in loader:
            if cfg.max_steps is not None and it >= cfg.max_steps:
                break
            images, masks = images.to(device), masks.to(device)
            t0 = time.perf_counter()
            t_pyr = None
            if teacher is not None:
                with torch.no_grad():
                    t_pyr = teacher.encode(images)
            pa, pyr_a = a.model.forward_features(images)
            pb, pyr_b = b.model.forward_features(images)
            la = objective(a, pa, pyr_a, pb, masks, t_pyr)
            a.loss_sum += step(a, la, epoch, it) * images.shape[0]
            if mode == "alternating" and weights.mut > 0:
                with torch.no_grad():
                    pa = a.model(images)
            lb = objective(b, pb, pyr_b, pa, masks, t_pyr)
            b.loss_sum += step(b, lb, epoch, it) * images.shape[0]
            if device.startswith("cuda"):
                torch.cuda.synchronize()
            times_ms.append((time.perf_counter() - t0) * 1000.0)
            seen += images.shape[0]
            it += 1
        if seen == 0:
            break
        evaluate_all(epoch, [p.loss_sum / seen for p in peers], median_ms(times_ms, cfg.timing_warmup))

    for p in peers:
        p.keeper.restore()
        p.record.ms_per_iter = median_ms(times_ms, cfg.timing_warmup)
        p.record.status = "ok"
        p.record.checkpoint = str(p.keeper.path) if p.keeper.path is not None else None
        if p.run_dir is not None:
            p.record.save(p.run_dir / "record.json")
    return a.record, b.record
