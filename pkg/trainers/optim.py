# trainers/optim.py
from __future__ import annotations

from typing import Iterable, Tuple

import torch

from state import PlateauState

# Hyperparameters beyond lr are fixed at the usual defaults and recorded per run.
OPTIMIZERS = {
    "adam": (torch.optim.Adam, {"betas": (0.9, 0.999), "eps": 1e-8, "weight_decay": 0.0}),
    "sgd": (torch.optim.SGD, {"momentum": 0.9, "weight_decay": 0.0, "nesterov": False}),
    "rmsprop": (torch.optim.RMSprop, {"alpha": 0.99, "eps": 1e-8, "momentum": 0.0, "weight_decay": 0.0}),
    "adadelta": (torch.optim.Adadelta, {"rho": 0.9, "eps": 1e-6, "weight_decay": 0.0}),
    "nadam": (torch.optim.NAdam, {"betas": (0.9, 0.999), "eps": 1e-8, "weight_decay": 0.0}),
}


def make_optimizer(name: str, params: Iterable, lr: float) -> Tuple[torch.optim.Optimizer, dict]:
    """Optimizer plus the full hyperparameter record for the RunRecord."""
    key = name.strip().lower()
    if key not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer '{name}' (known: {', '.join(OPTIMIZERS)})")
    cls, kwargs = OPTIMIZERS[key]
    optimizer = cls(params, lr=lr, **kwargs)
    hparams = {"name": key, "lr": lr}
    hparams.update({k: list(v) if isinstance(v, tuple) else v for k, v in kwargs.items()})
    return optimizer, hparams


def plateau_step(state: PlateauState, val_iou: float) -> float:
    """Advance the plateau tracker by one epoch and return the lr to use next."""
    if val_iou > state.best:
        state.best = val_iou
        state.num_bad_epochs = 0
        return state.lr
    state.num_bad_epochs += 1
    if state.num_bad_epochs >= state.patience:
        state.lr = state.lr * state.factor
        state.num_bad_epochs = 0
        state.drops += 1
    return state.lr


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
