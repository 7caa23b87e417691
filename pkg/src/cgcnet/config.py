"""Human-readable key/value configuration files.

One INI section per config object; each value is a JSON literal so tuples,
floats and strings survive a round trip unchanged.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, fields

from .graph import EdgeConfig, SamplerConfig
from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "edges": EdgeConfig,
    "synth": SynthConfig,
}


class ConfigError(ValueError):
    pass


def _parse_section(name, items):
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}; expected one of {sorted(known)}")
        try:
            kwargs[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"[{name}] {key}: value {raw!r} is not a JSON literal") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_config(text, sections=None):
    """Config objects for every section in ``sections`` (defaults fill gaps)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    wanted = list(sections or SECTIONS)
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {sorted(SECTIONS)}")
    out = {}
    for name in wanted:
        items = parser.items(name) if parser.has_section(name) else []
        out[name] = _parse_section(name, items)
    return out


def load_config(path, sections=None):
    if path is None:
        return parse_config("", sections)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, sections)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def dump_config(configs):
    """Render ``{section: dataclass}`` as INI text with JSON values."""
    lines = []
    for name, obj in configs.items():
        lines.append(f"[{name}]")
        for key, value in asdict(obj).items():
            lines.append(f"{key} = {json.dumps(_jsonable(value))}")
        lines.append("")
    return "\n".join(lines)


def default_text(sections=None):
    return dump_config(parse_config("", sections))
