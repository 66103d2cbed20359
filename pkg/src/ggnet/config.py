"""Plain-text run configuration (INI), mapped onto the component dataclasses.

Sections and keys mirror the dataclass fields one-to-one; anything not in
the schema is an error.  ``default_config_text()`` renders every default.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import EncoderConfig
from .data import PhantomParams
from .errors import ConfigError
from .losses import LossWeights
from .network import ModelConfig, TrainConfig


@dataclass
class DataConfig:
    train_count: int = 200
    test_count: int = 50
    train_seed: int = 100
    test_seed: int = 200
    root: str = ""  # existing dataset directory; empty means generate in memory


@dataclass
class RunConfig:
    phantom: PhantomParams = field(default_factory=PhantomParams)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, encoder=self.encoder)


SECTIONS = ("phantom", "encoder", "model", "train", "loss", "data")


def _fields(section: str) -> dict[str, dataclasses.Field]:
    cls = RunConfig.__dataclass_fields__[section].default_factory
    return {f.name: f for f in dataclasses.fields(cls) if not (section == "model" and f.name == "encoder")}


def _parse(raw: str, default, where: str):
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(default, str):
        return raw.strip()
    if isinstance(default, (list, tuple)):
        try:
            val = ast.literal_eval(raw.strip())
        except (ValueError, SyntaxError):
            raise ConfigError(f"{where}: expected a list, got {raw!r}") from None
        if not isinstance(val, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {raw!r}")
        return type(default)(val)
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value).join("[]")
    return str(value)


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Read ``path`` (or ``text``); missing keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
    try:
        parser.read_string(text or "")
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    base = RunConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        known = _fields(section)
        current = getattr(base, section)
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {', '.join(known)}")
            values[key] = _parse(raw, getattr(current, key), f"[{section}] {key}")
        try:
            updates[section] = dataclasses.replace(current, **values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}]: {e}") from None
    cfg = dataclasses.replace(base, **updates)
    cfg.phantom.validate()
    return cfg


def config_text(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for name in _fields(section):
            lines.append(f"{name} = {_format(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def default_config_text() -> str:
    return config_text(RunConfig())
