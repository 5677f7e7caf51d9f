# models/registry.py
from __future__ import annotations

from .base import EncoderBuilder, ModelBuilder, Registry

# Shipped builders register themselves when models.encoders / models.unet
# are imported; external code can add its own through the same calls.
_registry: Registry = Registry()


def get_registry() -> Registry:
    return _registry


def register_encoder(name: str, builder: EncoderBuilder = None):
    """Register an encoder family. Usable directly or as a decorator."""
    def _add(fn):
        _registry.encoders[name] = fn
        return fn

    return _add(builder) if builder is not None else _add


def register_decoder(name: str, builder: ModelBuilder = None):
    """Register an encoder-decoder builder taking (ModelSpec, seed)."""
    def _add(fn):
        _registry.decoders[name] = fn
        return fn

    return _add(builder) if builder is not None else _add


def encoder_builder(family: str) -> EncoderBuilder:
    try:
        return _registry.encoders[family]
    except KeyError:
        raise ValueError(
            f"unknown encoder family '{family}' (registered: {sorted(_registry.encoders)})"
        ) from None


def decoder_builder(name: str) -> ModelBuilder:
    try:
        return _registry.decoders[name]
    except KeyError:
        raise ValueError(
            f"unknown decoder '{name}' (registered: {sorted(_registry.decoders)})"
        ) from None
