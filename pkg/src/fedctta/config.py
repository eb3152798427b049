"""Flat ``key=value`` configuration files with dotted section keys.

Example::

    # 4 clusters, domains change every 10 slots
    clients = 20
    drift.n_clusters = 4
    model.hidden_dims = 32,32

Values are coerced to the type of the matching default. Unknown keys,
unparseable values and constraint violations raise ``ConfigurationError``
naming the offending key.
"""

from __future__ import annotations

import dataclasses
import typing

from .errors import ConfigurationError
from .orchestrator import ExperimentConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> dict[str, object]:
    """Every accepted dotted key mapped to its declared type."""
    keys = {}
    for name, tp in _field_types(ExperimentConfig).items():
        if dataclasses.is_dataclass(tp):
            for sub, sub_tp in _field_types(tp).items():
                keys[f"{name}.{sub}"] = sub_tp
        else:
            keys[name] = tp
    return keys


def coerce(key: str, raw, tp):
    """Convert ``raw`` (usually a string) to ``tp``."""
    if not isinstance(raw, str):
        raw = str(raw) if not isinstance(raw, (list, tuple)) else ",".join(map(str, raw))
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            if not text:
                raise ValueError("empty string")
            return text
        if typing.get_origin(tp) is tuple:
            (item,) = {a for a in typing.get_args(tp) if a is not Ellipsis}
            return tuple(item(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        name = getattr(tp, "__name__", str(tp))
        raise ConfigurationError(f"cannot read {raw!r} as {name}", key=key) from None
    raise ConfigurationError(f"unsupported type {tp}", key=key)


def read_config_file(path) -> dict[str, str]:
    """Parse ``path`` into raw ``{key: value}`` strings; later duplicates win."""
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigurationError(f"line {lineno}: expected key=value", key=str(path))
            entries[key.strip()] = value.strip()
    return entries


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (which win)."""
    raw = read_config_file(path) if path is not None else {}
    raw.update(overrides or {})
    keys = known_keys()
    changes = {}
    for key, value in raw.items():
        if key not in keys:
            raise ConfigurationError("unknown key", key=key)
        changes[key] = coerce(key, value, keys[key])
    return ExperimentConfig().replace(**changes).validate()


def dump_config(config: ExperimentConfig) -> str:
    """Render ``config`` in the file format, one sorted ``key = value`` per line."""
    flat = {}
    for name, value in config.to_dict().items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                flat[f"{name}.{sub}"] = sub_value
        else:
            flat[name] = value
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
