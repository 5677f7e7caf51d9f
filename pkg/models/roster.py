# models/roster.py
import json

import config as _cfg
from utils.logger import get_logger

from .base import STUDENT_DECODER_CHANNELS, TEACHER_DECODER_CHANNELS, ModelSpec

log = get_logger(__name__)

# --- NAMED MODEL SPECS ---
# Key = name used in plans and reports
# Value = ModelSpec in its JSON form
DEFAULT_ROSTER = {
    # --- TEACHER SCALE ---
    "teacher_vgg": {
        "family": "vgg_like",
        "width_multiplier": 1.0,
        "decoder_channels": list(TEACHER_DECODER_CHANNELS),
        "use_attention": True,
    },

    # --- STUDENTS ---
    "student_mbconv": {
        "family": "mbconv",
        "width_multiplier": 1.0,
        "decoder_channels": list(STUDENT_DECODER_CHANNELS),
        "use_attention": True,
    },
    "student_ir": {
        "family": "inverted_residual",
        "width_multiplier": 1.0,
        "decoder_channels": list(STUDENT_DECODER_CHANNELS),
        "use_attention": True,
    },
    "student_mvit": {
        "family": "mobilevit_like",
        "width_multiplier": 1.0,
        "decoder_channels": list(STUDENT_DECODER_CHANNELS),
        "use_attention": True,
    },

    # --- NARROW VARIANTS (benchmark roster) ---
    "student_mbconv_w050": {
        "family": "mbconv",
        "width_multiplier": 0.5,
        "decoder_channels": list(STUDENT_DECODER_CHANNELS),
        "use_attention": True,
    },
    "student_ir_w050": {
        "family": "inverted_residual",
        "width_multiplier": 0.5,
        "decoder_channels": list(STUDENT_DECODER_CHANNELS),
        "use_attention": True,
    },
}

ROSTER = dict(DEFAULT_ROSTER)


def _load_user_overrides(path=None):
    """
    Merge offnadir_roster.user.json (if present) over the default roster.
    """
    path = path or _cfg.ROSTER_USER_PATH
    if not path.exists():
        return

    try:
        with path.open("r", encoding="utf-8") as f:
            user_map = json.load(f)
    except json.JSONDecodeError as e:
        log.error("Invalid JSON in %s: %s", path.name, e)
        return

    if not isinstance(user_map, dict):
        log.warning("%s is not a JSON object, ignoring.", path.name)
        return

    for name, spec in user_map.items():
        try:
            ModelSpec.from_dict(spec)
        except (KeyError, TypeError, ValueError) as e:
            log.warning("Roster entry '%s' in %s is invalid (%s), ignoring.", name, path.name, e)
            continue
        ROSTER[name] = spec
    log.info("Loaded %d user roster entries from %s.", len(user_map), path.name)


def roster_spec(name: str, tile_size: int = 256) -> ModelSpec:
    if name not in ROSTER:
        raise ValueError(f"unknown model '{name}' (roster: {sorted(ROSTER)})")
    return ModelSpec.from_dict({**ROSTER[name], "tile_size": int(tile_size)})


def resolve_spec(entry, tile_size: int = 256) -> ModelSpec:
    """A roster name or an inline spec dict."""
    if isinstance(entry, str):
        return roster_spec(entry, tile_size)
    if isinstance(entry, dict):
        return ModelSpec.from_dict({"tile_size": int(tile_size), **entry})
    raise ValueError(f"model entry must be a roster name or a spec object, got {type(entry).__name__}")


# Run at import time so plans see the merged roster
_load_user_overrides()
