"""Flat run configuration: defaults, JSON config files, ``--key value`` overrides.

Every tunable default of the pipeline lives here under one documented key,
and the resolved configuration is written next to each command's outputs so
it can be fed back in with ``--config``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .csra import CsraHeadConfig
from .errors import ConfigError, ValidationError
from .frontend import FrontendConfig, MaskSpec
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # front end
    sample_rate: int = 16000
    target_samples: int = 131072
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 2000.0
    log_floor: float = 1e-10
    window: str = "hann"
    pad_mode: str = "reflect"
    mel_scale: str = "htk"
    # masking augmentation; fill is in standardised units
    mask_time_frames: int = 20
    mask_freq_bins: int = 40
    masks_per_axis: int = 1
    mask_fill: float = 0.0
    # backbone
    widths: tuple = (64, 128, 256, 512)
    kernel_size: int = 5
    pool_size: int = 2
    # head
    num_heads: int = 4
    temperatures: tuple = ()  # empty -> fixed schedule for num_heads
    lam: float = 0.1
    head_aggregation: str = "mean"
    share_head_weights: bool = False
    threshold: float = 0.5
    # optimisation
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    eta_min: float = 0.0
    loss_mode: str = "multilabel_bce"
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    val_fraction: float = 0.0
    threads: int = 1
    # data preparation
    split: str = "official"
    split_ratio: float = 0.6
    split_file: str = ""
    # synthetic data
    synth_per_class: int = 100
    synth_test_per_class: int = 50
    synth_sample_rate: int = 4000
    synth_cycles_per_recording: int = 5
    # outputs
    plots: bool = False

    def frontend(self) -> FrontendConfig:
        return FrontendConfig(self.sample_rate, self.target_samples, self.n_fft, self.hop, self.n_mels,
                              self.fmin, self.fmax, self.log_floor, self.window, self.pad_mode, self.mel_scale)

    def mask(self) -> MaskSpec:
        return MaskSpec(self.mask_time_frames, self.mask_freq_bins, self.masks_per_axis, self.mask_fill)

    def backbone(self, input_mean: float = 0.0, input_std: float = 1.0) -> BackboneConfig:
        return BackboneConfig(tuple(self.widths), self.kernel_size, self.pool_size, 1, input_mean, input_std)

    def head(self) -> CsraHeadConfig:
        return CsraHeadConfig(num_classes=2 if self.loss_mode == "multilabel_bce" else 4,
                              num_heads=self.num_heads,
                              temperatures=tuple(self.temperatures) or None,
                              lam=self.lam, feature_dim=self.widths[-1],
                              aggregation=self.head_aggregation, share_weights=self.share_head_weights)

    def train(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.eta_min, self.loss_mode,
                           self.seed, self.mask(), self.weight_decay, self.grad_clip, self.threads)

    def validate(self):
        try:
            self.frontend()
            self.head()
            self.backbone()
            self.train()
        except (ValueError, ValidationError) as exc:
            raise ConfigError(str(exc)) from None
        if self.split not in ("official", "ratio"):
            raise ConfigError(f"split must be 'official' or 'ratio', got {self.split!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["temperatures"] = ["inf" if math.isinf(t) else t for t in self.temperatures]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            return str(value)
        if kind == "tuple":
            items = value if isinstance(value, (list, tuple)) else \
                [v for v in str(value).replace(" ", "").split(",") if v]
            if key == "widths":
                return tuple(int(v) for v in items)
            return tuple(math.inf if str(v).lower() in ("inf", "infinity") else float(v) for v in items)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind}") from None
    raise ConfigError(f"config key {key!r} has unsupported type {kind}")


def normalize_key(key: str) -> str:
    return key.lstrip("-").replace("-", "_")


def _load_layer(path) -> dict:
    try:
        loaded = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from None
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: config must be a flat JSON object")
    return loaded


def resolve_config(config_path=None, overrides: dict | None = None, base_path=None) -> RunConfig:
    """Defaults, then ``base_path``, then the JSON file, then overrides; unknown keys are errors."""
    cfg = RunConfig()
    layers = [_load_layer(p) for p in (base_path, config_path) if p]
    layers.append(overrides or {})
    for layer in layers:
        for raw_key, value in layer.items():
            key = normalize_key(raw_key)
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {raw_key!r}")
            setattr(cfg, key, _coerce(key, value))
    cfg.validate()
    return cfg
