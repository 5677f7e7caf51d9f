# models/__init__.py
from .base import (
    FAMILIES,
    EncoderSpec,
    FeaturePyramid,
    ModelSpec,
    Registry,
    make_divisible,
)
from .registry import get_registry, register_decoder, register_encoder
from .encoders import build_encoder, encoder_forward
from .unet import (
    SegmentationModel,
    build_model,
    build_unet,
    count_params,
    freeze,
    load_checkpoint,
    save_checkpoint,
)
from .roster import ROSTER, resolve_spec, roster_spec

__all__ = [
    "FAMILIES",
    "EncoderSpec",
    "FeaturePyramid",
    "ModelSpec",
    "Registry",
    "make_divisible",
    "get_registry",
    "register_decoder",
    "register_encoder",
    "build_encoder",
    "encoder_forward",
    "SegmentationModel",
    "build_model",
    "build_unet",
    "count_params",
    "freeze",
    "load_checkpoint",
    "save_checkpoint",
    "ROSTER",
    "resolve_spec",
    "roster_spec",
]
