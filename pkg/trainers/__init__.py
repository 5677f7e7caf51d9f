from .optim import OPTIMIZERS, make_optimizer, plateau_step
from .loop import (
    ROLE_EPOCHS,
    DataBundle,
    DivergenceError,
    EvalResult,
    PlateauConfig,
    TrainConfig,
    evaluate,
    train,
)
from .transfer import DMLWeights, adapt_model, dml_train, kd_distill, par_reduction_pct, sda_adapt

__all__ = [
    "OPTIMIZERS",
    "make_optimizer",
    "plateau_step",
    "ROLE_EPOCHS",
    "DataBundle",
    "DivergenceError",
    "EvalResult",
    "PlateauConfig",
    "TrainConfig",
    "evaluate",
    "train",
    "DMLWeights",
    "adapt_model",
    "dml_train",
    "kd_distill",
    "par_reduction_pct",
    "sda_adapt",
]
