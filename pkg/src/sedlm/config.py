"""Run configuration: one INI-style file with [corpus], [model], [train], [schedule]."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict

from sedlm.model import ModelConfig
from sedlm.synthdata import CorpusSpec
from sedlm.trainer import TrainConfig

CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


# Desk profile: small enough for CI on one CPU core.
DESK_MODEL = dict(cnn_filters=16, gru_hidden=32, n_classes=6)
DESK_CORPUS = dict(frames=128, n_classes=6)

_SECTIONS = {
    "corpus": [f.name for f in fields(CorpusSpec)],
    "model": [f.name for f in fields(ModelConfig)],
    "train": ["batch_size", "lr", "clip", "patience", "max_epochs", "seed", "log_timing"],
    "schedule": ["gamma", "p_min", "p_max"],
}


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(**DESK_CORPUS))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(model=ModelConfig(**DESK_MODEL)))

    @property
    def model(self) -> ModelConfig:
        return self.train.model


def _parse(text: str, like: Any, key: str):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if key == "pool_plan":
        try:
            plan = tuple(tuple(int(v) for v in p.split("x")) for p in text.split(","))
            if any(len(p) != 2 for p in plan):
                raise ValueError
            return plan
        except ValueError:
            raise ConfigError(f"pool_plan: expected e.g. '1x5,1x4,1x2', got {text!r}") from None
    if isinstance(like, tuple):
        items = [s for s in text.split(",") if s.strip()]
        return tuple(_parse(s, like[0] if like else 0.0, key) for s in items)
    if key == "clip":
        return None if text.lower() in ("off", "none", "") else float(Fraction(text))
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(v) for v in p) for p in value)
        return ",".join(_format(v) for v in value)
    if value is None:
        return "off"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _current(cfg: RunConfig, section: str) -> Dict[str, Any]:
    if section == "corpus":
        return {k: getattr(cfg.corpus, k) for k in _SECTIONS["corpus"]}
    if section == "model":
        return {k: getattr(cfg.model, k) for k in _SECTIONS["model"]}
    return {k: getattr(cfg.train, k) for k in _SECTIONS[section]}


def apply_overrides(cfg: RunConfig, section: str, values: Dict[str, Any]) -> RunConfig:
    unknown = set(values) - set(_SECTIONS[section])
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        if section == "corpus":
            return replace(cfg, corpus=replace(cfg.corpus, **values))
        if section == "model":
            return replace(cfg, train=replace(cfg.train, model=replace(cfg.model, **values)))
        return replace(cfg, train=replace(cfg.train, **values))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def loads(text: str, base: RunConfig = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = base or RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(_SECTIONS)}")
        current = _current(cfg, section)
        values = {}
        for key, raw in parser.items(section):
            if key not in current:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse(raw, current[key], key)
        cfg = apply_overrides(cfg, section, values)
    return cfg


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return loads(p.read_text())


def dumps(cfg: RunConfig) -> str:
    out = []
    for section in _SECTIONS:
        out.append(f"[{section}]\n")
        for k, v in _current(cfg, section).items():
            out.append(f"{k} = {_format(v)}\n")
        out.append("\n")
    return "".join(out)


def defaults_help() -> str:
    cfg = RunConfig()
    lines = ["config file defaults (desk profile):"]
    for section in _SECTIONS:
        lines.append(f"  [{section}]")
        for k, v in _current(cfg, section).items():
            lines.append(f"    {k} = {_format(v)}")
    return "\n".join(lines)


def shipped(name: str) -> Path:
    """Path of a config bundled with the package (``desk``, ``full``, ``overfit``, ``ab``)."""
    p = CONFIG_DIR / f"{name}.cfg"
    if not p.exists():
        raise ConfigError(f"no shipped config named {name!r}")
    return p
