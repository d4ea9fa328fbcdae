"""Flat ``key = value`` config files.

Precedence when building a config: command-line flag > config file > default.
Keys are TrainConfig field names, EncoderConfig field names, or the grid
axis names of :class:`complexity_align.experiments.ExperimentGrid`.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any

from .encoders import EncoderConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, path=None) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path or '<config>'}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path or '<config>'}:{lineno}: empty key")
        out[key] = value
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), path)


def _coerce(value: Any, kind: type, key: str) -> Any:
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


_TRAIN_TYPES = {
    "batch_size": int, "learning_rate": float, "epochs": int, "alpha": float, "beta": float,
    "branch_c_enabled": bool, "branch_a_enabled": bool, "align_target": str, "anchor": int,
    "prompt_levels": int, "seed": int, "trainable_scope": str,
}
_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}


def build_train_config(base: TrainConfig, *layers: dict[str, Any], strict: bool = True,
                       ignore: set[str] = frozenset()) -> TrainConfig:
    """Apply ``layers`` (lowest precedence first) on top of ``base``."""
    train_kw = {}
    enc_kw = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None or key in ignore:
                continue
            if key in _TRAIN_TYPES:
                train_kw[key] = _coerce(value, _TRAIN_TYPES[key], key)
            elif key in _ENCODER_KEYS:
                enc_kw[key] = _coerce(value, int, key)
            elif strict:
                raise ConfigError(f"unknown config key {key!r}")
    encoder = EncoderConfig(**{**base.encoder.to_dict(), **enc_kw})
    merged = {**base.to_dict(), **train_kw, "encoder": encoder}
    return TrainConfig(**merged)
