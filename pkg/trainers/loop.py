# trainers/loop.py
"""
Supervised training with plateau LR drops, per-epoch validation and
checkpointing at the converging (best val IoU) epoch.
"""

from __future__ import annotations

import copy
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

import config as _cfg
from datagen.dataset import DatasetManifest
from datagen.loader import TileDataset
from losses import LossConfig, combined_loss
from metrics import ConfusionCounts, Scores, TileConfusion, binarize, confusion, macro_scores, pool, score
from models.unet import count_params, save_checkpoint
from state import EpochLog, PlateauState, RunRecord
from utils.hashing import config_hash
from utils.logger import get_logger

from .optim import make_optimizer, plateau_step, set_lr

log = get_logger(__name__)

ROLE_EPOCHS = {"teacher": 50, "student": 200}


class DivergenceError(RuntimeError):
    """Non-finite training loss. The diagnostic RunRecord is attached and saved."""

    def __init__(self, message: str, record: RunRecord):
        super().__init__(message)
        self.record = record


# ---- Config -----------------------------------------------------------------


@dataclass(frozen=True)
class PlateauConfig:
    metric: str = "val_iou"
    factor: float = 0.1
    patience: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.metric != "val_iou":
            raise ValueError(f"plateau metric must be val_iou, got {self.metric}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"plateau patience must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    optimizer: str = "rmsprop"
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 8
    seed: int = 0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    max_steps: Optional[int] = None             # cap on optimizer steps, for smoke runs
    timing_warmup: int = 10
    threshold: float = 0.5
    device: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        object.__setattr__(self, "loss", LossConfig.from_value(self.loss))
        if isinstance(self.plateau, dict):
            object.__setattr__(self, "plateau", PlateauConfig(**self.plateau))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__})

    @classmethod
    def for_role(cls, role: str, **overrides) -> "TrainConfig":
        return cls(**{"epochs": ROLE_EPOCHS[role], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d.pop("device")
        return d

    @property
    def resolved_device(self) -> str:
        return self.device or _cfg.DEVICE


@dataclass
class DataBundle:
    train: Optional[TileDataset]
    val: TileDataset

    @classmethod
    def from_dirs(cls, train_root=None, val_root=None, limit: Optional[int] = None) -> "DataBundle":
        """Train split of `train_root` and val split of `val_root` (default: the same directory)."""
        val_root = val_root or train_root
        train = None
        if train_root is not None:
            train = TileDataset(DatasetManifest.load(train_root), "train", for_training=True, limit=limit)
        val = TileDataset(DatasetManifest.load(val_root), "val", limit=limit)
        return cls(train=train, val=val)

    def describe(self) -> dict:
        out = {"val": {"root": str(self.val.manifest.root), "role": self.val.manifest.role}}
        if self.train is not None:
            out["train"] = {"root": str(self.train.manifest.root), "role": self.train.manifest.role}
        return out


# ---- Evaluation -------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    counts: ConfusionCounts
    scores: Scores
    macro: Scores
    tiles: List[TileConfusion]


def evaluate(model: nn.Module, dataset: TileDataset, loss_cfg: LossConfig = None,
             batch_size: int = 8, threshold: float = 0.5, device: Optional[str] = None) -> EvalResult:
    """Pooled and macro metrics plus per-tile counts on a whole split."""
    loss_cfg = loss_cfg or LossConfig()
    device = device or _cfg.DEVICE
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    total_loss, seen = 0.0, 0
    tiles: List[TileConfusion] = []
    with torch.no_grad():
        for images, masks, idx in loader:
            images, masks = images.to(device), masks.to(device)
            probs = model(images)
            total_loss += float(combined_loss(loss_cfg, probs, masks)) * images.shape[0]
            seen += images.shape[0]
            pred = binarize(probs.cpu().numpy(), threshold)
            gt = masks.cpu().numpy().astype(np.uint8)
            for k, i in enumerate(idx.tolist()):
                rec = dataset.records[i]
                tiles.append(TileConfusion(rec.id, confusion(pred[k], gt[k]), rec.stratum, rec.gsd_cm))
    model.train(was_training)
    counts = pool(t.counts for t in tiles)
    return EvalResult(
        loss=total_loss / seen if seen else 0.0,
        counts=counts,
        scores=score(counts),
        macro=macro_scores(t.counts for t in tiles),
        tiles=tiles,
    )


def epoch_log(epoch: int, train_loss: Optional[float], ev: EvalResult, lr: float,
              ms_per_iter: Optional[float] = None) -> EpochLog:
    s = ev.scores
    return EpochLog(
        epoch=epoch,
        train_loss=train_loss,
        val_loss=ev.loss,
        precision=s.precision,
        recall=s.recall,
        iou=s.iou,
        f1=s.f1,
        lr=lr,
        ms_per_iter=ms_per_iter,
        macro={"precision": ev.macro.precision, "recall": ev.macro.recall, "iou": ev.macro.iou, "f1": ev.macro.f1},
    )


# ---- Training ---------------------------------------------------------------


def make_loader(dataset: TileDataset, cfg: TrainConfig) -> DataLoader:
    """Shuffled train loader whose order depends on cfg.seed only."""
    gen = torch.Generator()
    gen.manual_seed(int(cfg.seed))
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=gen)


def median_ms(times_ms: List[float], warmup: int) -> Optional[float]:
    if not times_ms:
        return None
    kept = times_ms[warmup:] if len(times_ms) > warmup else times_ms
    return float(statistics.median(kept))


def new_record(name: str, kind: str, model: nn.Module, cfg: TrainConfig, data: DataBundle, **provenance) -> RunRecord:
    return RunRecord(
        name=name,
        kind=kind,
        seed=cfg.seed,
        model_spec=model.spec.to_dict(),
        config={**cfg.to_dict(), "config_hash": config_hash(cfg.to_dict())},
        params=count_params(model),
        provenance={"data": data.describe(), **provenance},
    )


def diverged(record: RunRecord, run_dir: Optional[Path], epoch: int, step: int, loss_value: float):
    record.status = "diverged"
    record.provenance["divergence"] = {"epoch": epoch, "step": step, "loss": loss_value}
    if run_dir is not None:
        record.save(Path(run_dir) / "record.json")
    log.error("Run %s diverged at epoch %d step %d (loss %s)", record.name, epoch, step, loss_value)
    return DivergenceError(f"non-finite loss {loss_value} at epoch {epoch}, step {step}", record)


class BestKeeper:
    """Holds the best-epoch weights in memory and on disk."""

    def __init__(self, model: nn.Module, run_dir: Optional[Path], seed: int, chash: str):
        self.model = model
        self.path = Path(run_dir) / "best.pt" if run_dir is not None else None
        self.seed = seed
        self.chash = chash
        self.state = None

    def keep(self, epoch: int) -> None:
        self.state = copy.deepcopy(self.model.state_dict())
        if self.path is not None:
            save_checkpoint(self.path, self.model, self.seed, self.chash, extra={"epoch": epoch})

    def restore(self) -> None:
        if self.state is not None:
            self.model.load_state_dict(self.state)


LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def fit(
    model: nn.Module,
    data: DataBundle,
    cfg: TrainConfig,
    record: RunRecord,
    loss_fn: LossFn,
    extra_params: Iterable[nn.Parameter] = (),
    run_dir=None,
) -> RunRecord:
    """
    Shared epoch loop: epoch-0 evaluation, then `cfg.epochs` passes over the
    train split with `loss_fn(images, masks)` as the objective. The model ends
    holding its best-epoch weights.
    """
    if data.train is None and cfg.epochs > 0:
        raise ValueError("training needs a train split")
    device = cfg.resolved_device
    run_dir = Path(run_dir) if run_dir is not None else None
    torch.manual_seed(int(cfg.seed))
    model.to(device)

    params = [p for p in model.parameters() if p.requires_grad] + list(extra_params)
    optimizer, hparams = make_optimizer(cfg.optimizer, params, cfg.lr)
    record.optimizer = hparams
    plateau = PlateauState(lr=cfg.lr, factor=cfg.plateau.factor, patience=cfg.plateau.patience)
    keeper = BestKeeper(model, run_dir, cfg.seed, record.config.get("config_hash"))

    ev = evaluate(model, data.val, cfg.loss, cfg.batch_size, cfg.threshold, device)
    if record.remember_epoch(epoch_log(0, None, ev, cfg.lr)):
        keeper.keep(0)

    loader = make_loader(data.train, cfg) if cfg.epochs > 0 else None
    times_ms: List[float] = []
    step = 0
    lr = cfg.lr
    for epoch in tqdm(range(1, cfg.epochs + 1), desc=record.name, leave=False, disable=None):
        model.train()
        loss_sum, seen = 0.0, 0
        for images, masks, _ in loader:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            images, masks = images.to(device), masks.to(device)
            t0 = time.perf_counter()
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(images, masks)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise diverged(record, run_dir, epoch, step, value)
            loss.backward()
            optimizer.step()
            if device.startswith("cuda"):
                torch.cuda.synchronize()
            times_ms.append((time.perf_counter() - t0) * 1000.0)
            loss_sum += value * images.shape[0]
            seen += images.shape[0]
            step += 1
        if seen == 0:
            break

        ev = evaluate(model, data.val, cfg.loss, cfg.batch_size, cfg.threshold, device)
        entry = epoch_log(epoch, loss_sum / seen, ev, lr, median_ms(times_ms, cfg.timing_warmup))
        if record.remember_epoch(entry):
            keeper.keep(epoch)
        log.debug("%s epoch %d: loss %.4f val IoU %.4f lr %.1e", record.name, epoch, entry.train_loss, entry.iou, lr)

        if cfg.plateau.enabled:
            new_lr = plateau_step(plateau, ev.scores.iou)
            if new_lr != lr:
                log.info("%s: val IoU plateau, lr %.1e -> %.1e", record.name, lr, new_lr)
                lr = new_lr
                set_lr(optimizer, lr)

    keeper.restore()
    record.ms_per_iter = median_ms(times_ms, cfg.timing_warmup)
    record.status = "ok"
    record.checkpoint = str(keeper.path) if keeper.path is not None else None
    if run_dir is not None:
        record.save(run_dir / "record.json")
    best = record.best
    log.info("%s: best val IoU %.4f at epoch %d", record.name, best.iou, best.epoch)
    return record


def train(model: nn.Module, data: DataBundle, cfg: TrainConfig, name: str = "train", run_dir=None) -> RunRecord:
    """Baseline supervised training of one model on `data.train`."""
    record = new_record(name, "train", model, cfg, data)

    def loss_fn(images, masks):
        return combined_loss(cfg.loss, model(images), masks)

    return fit(model, data, cfg, record, loss_fn, run_dir=run_dir)
