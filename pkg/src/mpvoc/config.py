"""Flat ``key = value`` configuration files mapped onto the nested TrainConfig.

Keys are dotted attribute paths (``model.topology.kind``, ``trainer.lr``).
Blank lines and lines starting with ``#`` are ignored. Unknown keys are
rejected with the offending key named.
"""
import configparser
import dataclasses
import typing

from . import trainer

_SECTION = "config"


class ConfigError(ValueError):
    pass


def _is_dataclass_type(tp):
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _fields(cls):
    hints = typing.get_type_hints(cls)
    return [(f.name, hints[f.name]) for f in dataclasses.fields(cls)]


def schema(cls=trainer.TrainConfig, prefix=""):
    """Map every flat key to its declared type."""
    out = {}
    for name, tp in _fields(cls):
        key = f"{prefix}{name}"
        if _is_dataclass_type(tp):
            out.update(schema(tp, key + "."))
        else:
            out[key] = tp
    return out


def to_flat(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = _render(value)
    return out


def _render(value):
    if isinstance(value, tuple):
        return ",".join(":".join(str(v) for v in item) for item in value)
    return value


def _coerce(key, tp, raw):
    if typing.get_origin(tp) is typing.Union:
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if not isinstance(raw, str):
        if tp is tuple and isinstance(raw, (list, tuple)):
            return tuple(tuple(int(v) for v in item) for item in raw)
        if tp is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, tp):
            return raw
        raise ConfigError(f"{key}: expected {tp.__name__}, got {raw!r}")
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if tp is tuple:
            return tuple(tuple(int(v) for v in item.split(":")) for item in text.split(",") if item)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def from_flat(flat, cls=trainer.TrainConfig, prefix=""):
    """Build a nested config; missing keys take dataclass defaults, unknown keys raise."""
    known = schema(cls, prefix)
    unknown = [k for k in flat if k not in known]
    if prefix == "" and unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    kwargs = {}
    for name, tp in _fields(cls):
        key = f"{prefix}{name}"
        if _is_dataclass_type(tp):
            sub = {k: v for k, v in flat.items() if k.startswith(key + ".")}
            if sub:
                kwargs[name] = from_flat(sub, tp, key + ".")
        elif key in flat:
            kwargs[name] = _coerce(key, tp, flat[key])
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration ({prefix or 'root'}): {exc}") from exc


def parse_text(text):
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return dict(parser.items(_SECTION))


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides in order."""
    flat = {}
    if path:
        with open(path) as fh:
            flat.update(parse_text(fh.read()))
    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value
    return from_flat(flat)


def dump_text(cfg):
    lines = []
    for key, value in to_flat(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"
