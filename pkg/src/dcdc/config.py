"""``key = value`` config files.

Grammar: one assignment per line, ``#`` starts a comment, blank lines are
ignored, keys are ``[A-Za-z_][A-Za-z0-9_]*``.  Tuple-valued keys take
comma-separated integers.  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import re
import types
import typing

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        out[key] = value
    return out


def load_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_kv(f.read(), str(path))


def parse_overrides(items) -> dict[str, str]:
    return parse_kv("\n".join(items or ()), "<overrides>")


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if tp is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
        if origin is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if origin in (typing.Union, types.UnionType):
            inner = [a for a in args if a is not type(None)]
            if value.lower() == "none":
                return None
            return _coerce(value, inner[0], key)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def build(cls, values: dict[str, str], aliases: dict[str, str] | None = None, base=None):
    """Instantiate dataclass ``cls`` from string values, rejecting unknown keys."""
    aliases = aliases or {}
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in values.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown key {key!r}")
        kwargs[name] = _coerce(value, hints[name], key)
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def split_keys(values: dict[str, str], *groups: set[str]) -> list[dict[str, str]]:
    """Partition ``values`` by key sets; keys in no group raise ConfigError."""
    out = [{} for _ in groups]
    for k, v in values.items():
        for i, g in enumerate(groups):
            if k in g:
                out[i][k] = v
                break
        else:
            raise ConfigError(f"unknown key {k!r}")
    return out


def format_kv(obj, aliases: dict[str, str] | None = None) -> str:
    inverse = {v: k for k, v in (aliases or {}).items()}
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{inverse.get(f.name, f.name)} = {v}")
    return "\n".join(lines)
