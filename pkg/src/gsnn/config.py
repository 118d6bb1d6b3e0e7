"""Seeded random streams and ``key=value`` configuration files."""

from __future__ import annotations

import dataclasses
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

CONFIG_ENV_VAR = "GSNN_CONFIG"


def substream(seed, name):
    """Independent generator for the named purpose (``init``, ``dropout``, ``data``...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


def read_config_file(path):
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", line=lineno, path=path)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_config_file(values, path):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


def _coerce(value, typ, key):
    if isinstance(value, str):
        text = value.strip()
        if "bool" in str(typ):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if "None" in str(typ) and text.lower() in ("", "none"):
            return None
        try:
            if "int" in str(typ):
                return int(text)
            if "float" in str(typ):
                return float(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
        return text
    return value


def apply_overrides(obj, values, prefix=""):
    """Return a copy of dataclass ``obj`` with ``values[prefix + field]`` applied."""
    changes = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in values and values[key] is not None:
            changes[f.name] = _coerce(values[key], f.type, key)
    return dataclasses.replace(obj, **changes) if changes else obj


def flatten(obj, prefix=""):
    return {prefix + f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
