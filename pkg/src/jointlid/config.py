"""One JSON document describing a run, parsed strictly.

Every section is optional and defaults to the desk-scale values; any key
that is not a known field is rejected with the full list of offenders.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .features import FeatureConfig
from .masking import MaskConfig
from .metrics import SWEEP_SPANS
from .trainer import QuantizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    num_langs: int = 4
    utts_per_lang: int = 70
    duration_s: float = 3.0
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # takes precedence over the synthetic corpus
    eval_manifest: str | None = None  # if absent, the data is split
    synthetic: SyntheticConfig = SyntheticConfig()
    train_frac: float = 5 / 7  # 50 of 70 per language -> 200 train / 80 eval
    split_seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    spans: tuple[int, ...] = SWEEP_SPANS
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = FeatureConfig()
    masking: MaskConfig = MaskConfig()
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    quantizer: QuantizerConfig = QuantizerConfig()
    data: DataConfig = DataConfig()
    sweep: SweepConfig = SweepConfig()
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        dotted = [f"{where}.{k}" if where else k for k in unknown]
        raise ConfigError(f"unknown config key(s): {', '.join(dotted)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default if f.default is not MISSING else None
        path = f"{where}.{name}" if where else name
        if hasattr(default, "__dataclass_fields__"):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    if cfg.masking.sub_sampling_factor != cfg.encoder.sub_sampling_factor:
        raise ConfigError("masking.sub_sampling_factor must equal encoder.sub_sampling_factor")
    if cfg.encoder.input_dim != cfg.features.n_mels:
        raise ConfigError("encoder.input_dim must equal features.n_mels")
    if cfg.train.lam > 0 and cfg.masking.span_ms == 0:
        raise ConfigError("train.lam > 0 requires masking.span_ms > 0")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(raw)
