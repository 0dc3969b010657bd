"""Run configuration as nested dataclasses with a flat ``section.key = value``
text form.

Example document::

    # toy run
    run.seed = 3
    model.embed_dim = 64
    mask.target_scale = 0.15, 0.2
    noise.mode = single_level
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .losses import LossWeights
from .noise import MODES, NoiseParams
from .vit import EncoderConfig, PredictorConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/njepa"
    wall_clock: bool = True


@dataclass
class ModelSection:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    pred_embed_dim: int = 32
    pred_depth: int = 2
    pred_heads: int = 4
    share_predictors: bool = False
    share_mask_tokens: bool = False
    pred_context_pos: bool = False  # add the position table to projected context tokens


@dataclass
class MaskSection:
    num_targets: int = 4
    target_scale: tuple = (0.15, 0.2)
    target_aspect: tuple = (0.75, 1.5)
    context_scale: tuple = (0.85, 1.0)
    max_retries: int = 16


@dataclass
class NoiseSection:
    mode: str = "multi_level"
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5


@dataclass
class LossSection:
    lambda1: float = 0.1
    lambda2: float = 0.1
    elementwise: bool = False


@dataclass
class ScheduleSection:
    lr_start: float = 1e-4
    lr_peak: float = 1e-3
    lr_final: float = 1e-6
    lr_shape: str = "cosine"
    warmup_fraction: float = 0.1
    wd_start: float = 0.04
    wd_final: float = 0.4
    ema_start: float = 0.996
    ema_final: float = 1.0
    ipe_scale: float = 1.25


@dataclass
class TrainSection:
    epochs: int = 10
    steps: int = 0  # > 0 overrides epochs
    batch_size: int = 32
    checkpoint_every: int = 0
    dtype: str = "float32"


@dataclass
class DataSection:
    path: str = ""
    eval_path: str = ""
    synthetic_seed: int = 0  # test split uses synthetic_seed + 1
    synthetic_classes: int = 4
    synthetic_per_class: int = 128
    synthetic_test_per_class: int = 64


@dataclass
class ProbeSection:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    label_fraction: float = 1.0
    feature_source: str = "last_layer_avg"
    last_k: int = 4
    encoder: str = "student"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskSection = field(default_factory=MaskSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    # -- derived component configs ---------------------------------------
    @property
    def grid(self) -> tuple[int, int]:
        g = self.model.image_size // self.model.patch_size
        return g, g

    @property
    def np_dtype(self):
        return np.dtype(self.train.dtype)

    def encoder_config(self) -> EncoderConfig:
        m = self.model
        gh, gw = self.grid
        return EncoderConfig(gh, gw, m.patch_size, m.channels, m.embed_dim, m.depth, m.heads, m.mlp_ratio)

    def predictor_config(self) -> PredictorConfig:
        m = self.model
        return PredictorConfig(m.pred_embed_dim, m.pred_depth, m.pred_heads, m.embed_dim, m.mlp_ratio)

    def noise_params(self) -> NoiseParams:
        n = self.noise
        return NoiseParams(n.p_mean, n.p_std, n.sigma_data, n.mode)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss.lambda1, self.loss.lambda2, self.loss.elementwise)

    def mask_kwargs(self) -> dict:
        k = self.mask
        return dict(num_targets=k.num_targets, target_scale=tuple(k.target_scale),
                    target_aspect=tuple(k.target_aspect), context_scale=tuple(k.context_scale),
                    max_retries=k.max_retries)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.image_size % m.patch_size:
            raise ConfigError("model.image_size must be divisible by model.patch_size")
        self.encoder_config()
        self.predictor_config()
        self.noise_params()
        self.loss_weights()
        if self.noise.mode not in MODES:
            raise ConfigError(f"noise.mode must be one of {MODES}")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.probe.feature_source not in ("last_layer_avg", "concat_last_k"):
            raise ConfigError("probe.feature_source must be last_layer_avg or concat_last_k")
        if self.probe.encoder not in ("student", "teacher"):
            raise ConfigError("probe.encoder must be student or teacher")
        if not 0 < self.probe.label_fraction <= 1:
            raise ConfigError("probe.label_fraction must lie in (0, 1]")
        for name in ("target_scale", "target_aspect", "context_scale"):
            rng = getattr(self.mask, name)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ConfigError(f"mask.{name} must be an increasing pair")
        return self

    # -- flat key access -----------------------------------------------
    def flat(self) -> dict[str, Any]:
        out = {}
        for sec in dataclasses.fields(self):
            section = getattr(self, sec.name)
            for f in dataclasses.fields(section):
                out[f"{sec.name}.{f.name}"] = getattr(section, f.name)
        return out

    def set(self, key: str, value: Any) -> None:
        sec, _, name = key.partition(".")
        section = getattr(self, sec, None)
        if section is None or not dataclasses.is_dataclass(section) or not name:
            raise ConfigError(f"unknown config key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(section)}
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, name, _coerce(key, getattr(section, name), value))

    def dumps(self) -> str:
        lines = [f"# njepa run config v{CONFIG_VERSION}"]
        for key, value in self.flat().items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        """sha256 over the keys that affect training (not output paths, timing or probe)."""
        items = [f"{k}={_format(v)}" for k, v in self.flat().items()
                 if k not in ("run.output_dir", "run.wall_clock") and not k.startswith("probe.")]
        return hashlib.sha256("\n".join(items).encode()).digest()

    def copy(self) -> "RunConfig":
        return loads(self.dumps())


def _parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, current: Any, value: Any) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        value = _parse_value(value)
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if isinstance(current, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(current, tuple):
            return tuple(float(v) for v in value)
        if isinstance(current, str):
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"bad value {value!r} for {key} (expected {type(current).__name__})")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_HEADER = re.compile(r"#\s*njepa run config v(\d+)")


def loads(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    head = _HEADER.match(text.lstrip())
    if head and int(head.group(1)) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {head.group(1)}")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return loads(text, overrides)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.dumps())
