"""Run configuration: an INI file with ``[model]``, ``[train]`` and ``[data]`` sections.

Every key has a default.  Precedence, lowest first: built-in defaults, the
``LESIONCASCADE_SEED`` environment variable, the config file, command-line
overrides.  The environment variable only fills in the training and data
seeds when the file does not set them.

Keys are the dataclass field names, except where a command-line flag exists;
those use the flag's spelling (``stages``, ``warmup_iters``, ``max_iters``) so
the file and the flags match one-to-one.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .autodiff import ConfigurationError
from .data import SynthConfig
from .model import ModelConfig
from .train import TrainConfig

__all__ = ["RunConfig", "load_run_config", "SEED_ENV", "SECTIONS"]

SEED_ENV = "LESIONCASCADE_SEED"

# file key -> dataclass field, per section
ALIASES = {
    "model": {"stages": "num_stages"},
    "train": {"warmup_iters": "warmup_iterations", "max_iters": "max_iterations"},
    "data": {},
}
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthConfig}


def _parse_value(text: str, default: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(part) for part in text.replace(" ", "").split(",") if part)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _file_key(section: str, name: str) -> str:
    for alias, target in ALIASES[section].items():
        if target == name:
            return alias
    return name


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def section(self, name: str):
        return getattr(self, name)

    def update(self, section: str, values: Mapping[str, Any]) -> "RunConfig":
        """Return a copy with ``values`` applied to ``section`` (file or field keys)."""
        if not values:
            return self
        cls = SECTIONS[section]
        names = {f.name for f in dataclasses.fields(cls)}
        current = dataclasses.asdict(self.section(section))
        for key, value in values.items():
            name = ALIASES[section].get(key, key)
            if name not in names:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            current[name] = value
        try:
            rebuilt = cls(**current)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"[{section}]: {exc}") from exc
        return dataclasses.replace(self, **{section: rebuilt})

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in dataclasses.fields(self.section(section)):
                value = getattr(self.section(section), f.name)
                lines.append(f"{_file_key(section, f.name)} = {_format_value(value)}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def _read_file(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"{path}: unknown section(s) {sorted(unknown)}")
    return {s: dict(parser[s]) for s in parser.sections()}


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Resolve a :class:`RunConfig`; ``overrides`` maps section -> {key: value}."""
    environ = os.environ if environ is None else environ
    cfg = RunConfig()
    env_seed = environ.get(SEED_ENV)
    if env_seed not in (None, ""):
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        cfg = cfg.update("train", {"seed": seed}).update("data", {"seed": seed})

    raw = _read_file(path) if path else {}
    for section, values in raw.items():
        defaults = dataclasses.asdict(cfg.section(section))
        parsed = {}
        for key, text in values.items():
            name = ALIASES[section].get(key, key)
            if name not in defaults:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            parsed[key] = _parse_value(text, defaults[name], f"[{section}] {key}")
        cfg = cfg.update(section, parsed)

    for section, values in (overrides or {}).items():
        cfg = cfg.update(section, {k: v for k, v in values.items() if v is not None})
    try:
        cfg.data.validate()
    except ValueError as exc:
        raise ConfigurationError(f"[data]: {exc}") from exc
    return cfg
