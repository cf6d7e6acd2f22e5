"""Flat key-value config files mapped onto dataclass configs.

Format: one ``key = value`` pair per line, ``#`` starts a comment.  Keys
match the config dataclass field names; the single exception is the
reserved word ``lambda``, stored on dataclasses as ``lambda_`` but written
to files as ``lambda``.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


_FIELD_TO_KEY = {"lambda_": "lambda"}
_KEY_TO_FIELD = {v: k for k, v in _FIELD_TO_KEY.items()}


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(value: str, target):
    if target is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if target is int:
        return int(value)
    if target is float:
        return float(value)
    return value


def load_config(cls, path) -> object:
    """Build a config dataclass from a flat key-value file."""
    pairs = parse_kv(Path(path).read_text())
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in pairs.items():
        field = _KEY_TO_FIELD.get(key, key)
        if field not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        try:
            kwargs[field] = _convert(value, hints[field])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    return cls(**kwargs)


def save_config(cfg, path) -> None:
    lines = []
    for field in dataclasses.fields(cfg):
        key = _FIELD_TO_KEY.get(field.name, field.name)
        value = getattr(cfg, field.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
