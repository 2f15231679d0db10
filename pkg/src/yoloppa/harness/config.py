"""Flat ``key = value`` config files for ModelConfig and TrainConfig fields.

Lines starting with ``#`` are comments.  Tuples are written comma-separated
(``base_repeats = 3,6,6,3``).  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

from ..model.network import ModelConfig
from .train import TrainConfig


class ConfigFileError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.split(",") if v.strip())
        if default is None:
            if raw.lower() in ("none", ""):
                return None
            return int(raw)
        return raw
    except ValueError:
        raise ConfigFileError(f"key {name!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> tuple:
    """Return (ModelConfig kwargs, TrainConfig kwargs).  ``seed`` feeds both."""
    model_defaults = {f.name: getattr(ModelConfig(), f.name) for f in dataclasses.fields(ModelConfig)}
    train_defaults = {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_defaults:
            model_kw[key] = _convert(value, model_defaults[key], key)
        if key in train_defaults:
            train_kw[key] = _convert(value, train_defaults[key], key)
        if key not in model_defaults and key not in train_defaults:
            raise ConfigFileError(f"{source}:{no}: unknown key {key!r}")
    return model_kw, train_kw


def load_config(path: Optional[str]) -> tuple:
    if path is None:
        return {}, {}
    p = Path(path)
    return parse_config_text(p.read_text("utf-8"), str(p))
