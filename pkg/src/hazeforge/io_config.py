# io_config.py - load key=value override files into Settings
# format: UTF-8, one `section.field=value` per line, '#' starts a comment
#   dcp.omega=0.9
#   bccr.c0=0.08,0.08,0.08
# unknown keys are errors so a typo never silently keeps the default
# reference: https://docs.python.org/3/library/dataclasses.html#dataclasses.replace

from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin

from hazeforge.models import Settings


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def load_overrides(path) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            overrides[key] = value
    return overrides


def _coerce(value: str, tp: Any, key: str) -> Any:
    origin = get_origin(tp)
    if origin is Union:
        # Optional[...]
        if value.lower() in ("none", ""):
            return None
        inner = [a for a in get_args(tp) if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        args = get_args(tp)
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0], key) for p in parts)
        if len(parts) == 1:
            parts = parts * len(args)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {value!r}")
        return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    try:
        if tp is bool:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {tp.__name__}") from None
    return value


def apply_overrides(settings: Settings, overrides: Dict[str, Any]) -> Settings:
    sections = {f.name: getattr(settings, f.name) for f in fields(settings)}
    changes: Dict[str, Dict[str, Any]] = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"Unknown config key '{key}' (sections: {sorted(sections)})")
        known = {f.name: f.type for f in fields(sections[section])}
        if name not in known:
            raise ConfigError(f"Unknown config key '{key}' (fields: {sorted(known)})")
        if isinstance(value, str):
            value = _coerce(value, known[name], key)
        changes.setdefault(section, {})[name] = value

    updated = {s: replace(sections[s], **kw) for s, kw in changes.items()}
    result = replace(settings, **updated)
    try:
        result.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return result


def load_settings(path: Optional[Union[str, Path]] = None) -> Settings:
    settings = Settings()
    if path is None:
        settings.validate()
        return settings
    return apply_overrides(settings, load_overrides(path))
