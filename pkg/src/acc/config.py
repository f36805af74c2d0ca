"""Flat `key = value` config files with dotted keys.

One assignment per line, `#` comments, values kept as strings until a typed
getter coerces them. The canonical hash covers the sorted key/value pairs,
so formatting and comments never change it.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError

_KEY_CHARS = set("abcdefghijklmnopqrstuvwxyz0123456789_.")


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not set(key) <= _KEY_CHARS or key.startswith(".") or key.endswith("."):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_hash(cfg: dict[str, str]) -> str:
    h = hashlib.sha256()
    for key in sorted(cfg):
        h.update(key.encode())
        h.update(b"=")
        h.update(str(cfg[key]).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def _get(cfg, key, default, kind, convert):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return convert(cfg[key])
    except ConfigError:
        raise
    except Exception:
        raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not {kind}")


def get_int(cfg, key, default=None) -> int:
    return _get(cfg, key, default, "an integer", lambda v: int(v, 0))


def get_float(cfg, key, default=None) -> float:
    return _get(cfg, key, default, "a number", float)


def get_str(cfg, key, default=None) -> str:
    return _get(cfg, key, default, "a string", str)


def get_bool(cfg, key, default=None) -> bool:
    def convert(v):
        low = v.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: {v!r} is not a boolean")
    return _get(cfg, key, default, "a boolean", convert)


def get_ints(cfg, key, default=None) -> tuple[int, ...]:
    def convert(v):
        parts = [p.strip() for p in v.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"config key {key!r}: empty integer list")
        return tuple(int(p, 0) for p in parts)
    return _get(cfg, key, default, "a comma-separated integer list", convert)


def get_floats(cfg, key, default=None) -> tuple[float, ...]:
    def convert(v):
        parts = [p.strip() for p in v.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"config key {key!r}: empty number list")
        return tuple(float(p) for p in parts)
    return _get(cfg, key, default, "a comma-separated number list", convert)
