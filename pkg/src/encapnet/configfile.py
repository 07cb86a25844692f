"""INI run configs -> typed configs.

Sections: [net], [stem], [module1..N] (in order, no gaps), [ot], [train],
[data]. Unknown keys are configuration errors so typos fail loudly instead
of silently keeping a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from .errors import ConfigError
from .data import DataConfig
from .network import ModuleSpec, NetworkConfig, StemSpec
from .sinkhorn import OTConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    net: NetworkConfig
    train: TrainConfig
    data: DataConfig
    text: str = ""


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    parts = [p.strip() for p in v.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _strs(v: str) -> tuple:
    return tuple(p.strip() for p in v.split(",") if p.strip())


# tuple-valued keys holding words rather than numbers
_STRING_TUPLES = {"ot"}


def _apply(section, cls, **fixed):
    """Build a dataclass from an INI section with type-driven casting."""
    kwargs = dict(fixed)
    by_name = {f.name: f for f in fields(cls)}
    for key in section:
        if key in fixed:
            raise ConfigError(f"{key!r} is set by the loader and cannot appear in the file")
        if key not in by_name:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        f = by_name[key]
        raw = section[key]
        if f.type in ("tuple", tuple):
            kwargs[key] = _strs(raw) if key in _STRING_TUPLES else _ints(raw)
        elif f.type in ("bool", bool):
            kwargs[key] = _bool(raw)
        elif f.type in ("int", int):
            kwargs[key] = int(raw)
        elif f.type in ("float", float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip()
    return cls(**kwargs)


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"bad INI: {e}") from e

    if "net" not in cp:
        raise ConfigError("config needs a [net] section")

    stem = _apply(cp["stem"], StemSpec) if "stem" in cp else StemSpec()

    mods = []
    i = 1
    while f"module{i}" in cp:
        mods.append(_apply(cp[f"module{i}"], ModuleSpec))
        i += 1
    for name in cp.sections():
        if name.startswith("module") and name not in {f"module{j + 1}" for j in range(len(mods))}:
            raise ConfigError(f"module sections must be consecutive from module1; found {name}")

    ot = _apply(cp["ot"], OTConfig) if "ot" in cp else OTConfig()
    net = _apply(cp["net"], NetworkConfig, stem=stem, modules=tuple(mods), ot=ot)
    train = _apply(cp["train"], TrainConfig) if "train" in cp else TrainConfig()
    data = _apply(cp["data"], DataConfig) if "data" in cp else DataConfig()
    return RunConfig(net=net, train=train, data=data, text=text)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())
