"""Flat key = value config files shared by the scene and tracker configs."""

from __future__ import annotations

from .errors import ConfigError


def read_kv(path) -> dict:
    """Parse a flat config file of `key = value` lines; # starts a comment."""
    out = {}
    try:
        fh = open(path, "r", encoding="ascii")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected `key = value`, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_kv(path, kv: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for key, val in kv.items():
            if isinstance(val, float):
                fh.write(f"{key} = {val:.10g}\n")
            else:
                fh.write(f"{key} = {val}\n")
