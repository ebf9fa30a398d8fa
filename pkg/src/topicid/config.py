"""Typed run configuration stored as INI text (one section per component)."""

from __future__ import annotations

import configparser
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .encoders import AudioEncoderConfig, TDNNConfig
from .numcore import OptimizerConfig
from .seq2seq import DecoderConfig

SYSTEM_NAMES = (
    "text_pipeline",
    "text_man_trn",
    "text_semi_sup",
    "audio_only",
    "emb_transfer",
    "audio_text_concat",
    "multi_task",
    "audio_bl",
    "audio_text_bl",
    "asr_standalone",
)
MULTI_STAGE = ("emb_transfer", "multi_task")
STAGES = ("single", "pretrain", "finetune")


class ConfigError(ValueError):
    pass


@dataclass
class TextConfig:
    dim: int = 64
    trainable: bool = False
    blstm_hidden: int = 64
    table_path: str = ""


@dataclass
class ObjectiveConfig:
    ctc_weight: float = 0.5
    ctc_cutoff_epoch: int = 20
    mean_weights: bool = False


@dataclass
class DecodeConfig:
    beam_size: int = 10
    monitor_beam_size: int = 1
    max_len: int = 60
    length_normalize: bool = False


@dataclass
class DataConfig:
    max_duration_s: float = 50.0
    include_asr: bool = False


@dataclass
class SystemConfig:
    name: str = "audio_only"
    stage: str = "single"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 16
    early_stopping_patience: int = 0
    save_every_epoch: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    audio_encoder: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    tdnn: TDNNConfig = field(default_factory=TDNNConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    text: TextConfig = field(default_factory=TextConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.name not in SYSTEM_NAMES:
            raise ConfigError(f"unknown system {self.name!r}; expected one of {', '.join(SYSTEM_NAMES)}")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage != "single" and self.name not in MULTI_STAGE:
            raise ConfigError(f"system {self.name} has no {self.stage} stage")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["system"] = {f.name: _fmt(getattr(self, f.name)) for f in fields(self) if not is_dataclass(getattr(self, f.name))}
        for f in fields(self):
            sub = getattr(self, f.name)
            if is_dataclass(sub):
                parser[f.name] = {g.name: _fmt(getattr(sub, g.name)) for g in fields(sub)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(raw: str, default, hint, key: str):
    try:
        if isinstance(default, bool) or hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _coerced(obj, key: str, raw: str, prefix: str):
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {prefix}{key}")
    default = getattr(obj, key)
    if is_dataclass(default):
        raise ConfigError(f"{prefix}{key} is a section, not a value")
    hints = typing.get_type_hints(type(obj))
    return _coerce(raw, default, hints.get(key), prefix + key)


def apply_overrides(cfg: SystemConfig, pairs: dict[str, str]) -> SystemConfig:
    """``pairs`` maps ``section.key`` (or a bare ``key`` for the system section) to raw text."""
    grouped: dict[str, dict[str, str]] = {}
    for dotted, raw in pairs.items():
        section, _, key = dotted.rpartition(".")
        grouped.setdefault(section or "system", {})[key] = raw
    top = {}
    for section, items in grouped.items():
        if section == "system":
            top.update({k: _coerced(cfg, k, v, "system.") for k, v in items.items()})
            continue
        if section not in {f.name for f in fields(cfg)} or not is_dataclass(getattr(cfg, section)):
            raise ConfigError(f"unknown config section [{section}]")
        sub = getattr(cfg, section)
        try:
            top[section] = replace(sub, **{k: _coerced(sub, k, v, f"{section}.") for k, v in items.items()})
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return replace(cfg, **top)


def parse_config(text: str, base: SystemConfig | None = None) -> SystemConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    pairs = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            pairs[f"{section}.{key}"] = raw
    return apply_overrides(base or SystemConfig(), pairs)


def load_config(path, base: SystemConfig | None = None) -> SystemConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base)


def default_config(system: str, stage: str = "single", seed: int = 0) -> SystemConfig:
    """Desk-scale defaults per system."""
    cfg = SystemConfig(name=system, stage=stage if system in MULTI_STAGE else "single", seed=seed)
    if system.startswith("text_"):
        cfg = replace(cfg, epochs=40, batch_size=32, optimizer=OptimizerConfig(lr=0.01))
    elif system == "asr_standalone":
        cfg = replace(cfg, epochs=30, batch_size=10, optimizer=OptimizerConfig(lr=2e-3, clip_norm=5.0))
    elif system == "multi_task":
        epochs = 25 if cfg.stage != "finetune" else 4
        cfg = replace(cfg, epochs=epochs, batch_size=16, optimizer=OptimizerConfig(lr=2e-3, clip_norm=5.0))
    else:
        cfg = replace(cfg, epochs=6, batch_size=16, optimizer=OptimizerConfig(lr=2e-3, clip_norm=5.0))
    return cfg
