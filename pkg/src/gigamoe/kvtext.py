"""Key/value text configs and atomic file writes.

The format is one ``key = value`` pair per line; blank lines and lines
starting with ``#`` are ignored. Values are coerced to the annotated type of
the matching dataclass field. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import os
import tempfile
import typing
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def dump_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in values.items())


def _coerce(name: str, raw: str, typ) -> Any:
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union:
        non_none = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(name, raw, non_none[0])
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin in (tuple, list):
            inner = args[0] if args else str
            items = [s.strip() for s in raw.split(",") if s.strip()]
            vals = [_coerce(name, s, inner) for s in items]
            return tuple(vals) if origin is tuple else vals
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    raise ConfigError(f"{name}: unsupported field type {typ}")


def from_kv(cls, values: Mapping[str, str], env_prefix: str | None = None):
    """Build dataclass ``cls`` from string values, optionally overlaid by
    environment variables ``<env_prefix><KEY>``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    merged = dict(values)
    if env_prefix:
        for name in names:
            env_key = env_prefix + name.upper()
            if env_key in os.environ:
                merged[name] = os.environ[env_key]
    unknown = sorted(set(merged) - names)
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in merged.items()}
    return cls(**kwargs)


def to_kv(obj) -> str:
    return dump_kv({f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)})


def load_kv_file(cls, path: str | os.PathLike, env_prefix: str | None = None):
    return from_kv(cls, parse_kv(Path(path).read_text(encoding="utf-8")), env_prefix)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
