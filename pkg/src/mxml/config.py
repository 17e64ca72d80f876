"""Plain-text ``key = value`` run configuration.

Keys are namespaced ``model.<field>`` or ``train.<field>``; ``#`` starts a
comment.  Precedence, lowest to highest: dataclass defaults, config file,
command-line flags.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig}


def _format(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def dumps(model: ModelConfig, train: TrainConfig) -> str:
    lines = []
    for section, obj in (("model", model), ("train", train)):
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, overrides=None):
    """Parse config text into ``(ModelConfig, TrainConfig)``; ``overrides`` wins."""
    values = {"model": {}, "train": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        _set(values, key, raw, lineno)
    for key, val in (overrides or {}).items():
        if val is not None:
            _set(values, key, val, None)
    model_defaults, train_defaults = ModelConfig(), TrainConfig()
    m = _typed(values["model"], model_defaults)
    t = _typed(values["train"], train_defaults)
    return ModelConfig(**m), TrainConfig(**t)


def _set(values, key, raw, lineno):
    section, _, name = key.partition(".")
    if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"config {where}unknown key {key!r}")
    values[section][name] = raw


def _typed(raw_values, defaults):
    out = {}
    for name, raw in raw_values.items():
        default = getattr(defaults, name)
        try:
            out[name] = _parse(raw, default) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None
    return out


def load(path, overrides=None):
    return loads(Path(path).read_text() if path else "", overrides)


def save(path, model: ModelConfig, train: TrainConfig):
    Path(path).write_text(dumps(model, train))
