#!/usr/bin/env python3
"""
Central configuration for offnadir.

- Loads `.env`
- Provides dataset / run directories and device selection
- Loads JSON run configs and applies dotted-key overrides
"""

import json
import os
import sys
from pathlib import Path

from dotenv import load_dotenv  # make sure python-dotenv is installed


# ----------------- Paths & env loading -----------------

BASE_DIR = Path(__file__).resolve().parent

# Load .env from project root explicitly
DOTENV_PATH = BASE_DIR / ".env"
if DOTENV_PATH.exists():
    load_dotenv(DOTENV_PATH)
else:
    print("[config] Warning: .env file not found in project root.",
          file=sys.stderr)


def _env_path(key, default):
    value = os.getenv(key)
    return Path(value).expanduser() if value else default


DATA_ROOT = _env_path("OFFNADIR_DATA_ROOT", BASE_DIR / "data")
RUNS_DIR = _env_path("OFFNADIR_RUNS_DIR", BASE_DIR / "runs")
LOG_LEVEL = os.getenv("OFFNADIR_LOG_LEVEL", "INFO")
WORKERS = int(os.getenv("OFFNADIR_WORKERS", "1"))
OFF_NADIR_TAN = float(os.getenv("OFFNADIR_OFF_NADIR_TAN", "0.25"))

ROSTER_USER_PATH = BASE_DIR / "offnadir_roster.user.json"


# ----------------- Device -----------------

def _detect_device():
    requested = (os.getenv("OFFNADIR_DEVICE") or "").strip().lower()
    if requested:
        return requested
    try:
        import torch
    except ImportError:
        return "cpu"
    return "cuda" if torch.cuda.is_available() else "cpu"


DEVICE = _detect_device()


# ----------------- JSON run configs -----------------

def load_json_config(path) -> dict:
    """
    Load a JSON run config.

    The file must hold a JSON object; anything else is rejected instead of
    being half-used.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} is not a JSON object")
    return data


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides) -> dict:
    """
    Apply `dotted.key=value` overrides on top of a loaded config.

    Overrides are applied in order, so the last flag wins. Values are parsed
    as JSON when possible ("1e-4", "true", "[1,2]"), otherwise kept as text.
    """
    merged = json.loads(json.dumps(cfg))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ValueError(f"override '{item}' has an empty key")
        node = merged
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return merged
