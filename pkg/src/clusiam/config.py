"""Flat key=value config files mirroring TrainConfig field names.

Lines are ``key = value``; ``#`` starts a comment. CLI flags override file
values, file values override dataclass defaults. The resolved config is
always written back into the run directory.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .trainer import TrainConfig


def _parse_value(name: str, raw: str, py_type):
    raw = raw.strip()
    if py_type is bool or py_type == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if py_type is int or py_type == "int":
        return int(raw)
    if py_type is float or py_type == "float":
        return float(raw)
    if py_type is str or py_type == "str":
        return raw
    # tuples of ints (hidden layer sizes): comma separated
    return tuple(int(part) for part in raw.split(",") if part.strip())


def field_types() -> dict[str, object]:
    return {f.name: f.type for f in fields(TrainConfig)}


def read_config_file(path: str | Path) -> dict:
    types = field_types()
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    return values


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """defaults < config file < explicit overrides (CLI flags)."""
    merged: dict = {}
    if file_values:
        merged.update(file_values)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**merged)


def write_config_file(path: str | Path, cfg: TrainConfig) -> None:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
