"""Flat ``key = value`` config files and their mapping onto frozen dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

_SECTION = "root"


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` and ``;`` start comments."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if len(cp.sections()) != 1:
        raise ConfigError(f"{source}: section headers are not allowed in flat config files")
    return dict(cp[_SECTION])


def load_flat(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_flat(p.read_text(encoding="utf-8"), str(p))


def dump_flat(values: Mapping[str, Any]) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(str(x) for x in v)
        elif v is None:
            v = "none"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(values: Mapping[str, Any]) -> str:
    """Short stable digest of a config mapping, used in provenance headers."""
    return hashlib.sha256(dump_flat(dict(sorted(values.items()))).encode()).hexdigest()[:16]


def _scalar(tp, raw: str, key: str):
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {tp.__name__}") from exc


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if raw.strip().lower() == "none":
            return None
        return _coerce(next(a for a in args if a is not type(None)), raw, key)
    if origin in (tuple, list) or tp in (tuple, list):
        inner = args[0] if args else float
        items = [s for s in raw.split(",") if s.strip()]
        return tuple(_scalar(inner, s, key) for s in items)
    return _scalar(tp, raw, key)


def from_mapping(cls, values: Mapping[str, str], strict: bool = True):
    """Build dataclass ``cls`` from string values, converting by annotation.

    Keys absent from ``values`` keep their defaults.  With ``strict`` an
    unknown key is a config error; otherwise unknown keys are ignored so one
    file can feed several dataclasses.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, k) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def to_mapping(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}
