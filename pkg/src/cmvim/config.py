"""Run configuration: model shape and training hyperparameters.

Config files are flat ``key = value`` UTF-8 text (``#`` comments). Keys map
onto :class:`ModelConfig` or :class:`TrainConfig` fields; anything else is a
:class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    volume_size: int = 32
    patch_size: int = 8
    d_model: int = 32
    depth: int = 2
    decoder_depth: int = 1
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0              # 0 -> ceil(d_model / 16)
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    discretization: str = "zoh"   # or "euler" (input weight only)
    heads: int = 1
    d_proj: int = 128
    proj_hidden: int = 0          # 0 -> d_model
    head_hidden: int = 0          # 0 -> d_model
    num_classes: int = 3
    use_class_token: bool = True
    norm_pix: bool = False
    recon_scope: str = "masked"   # or "full"
    temperature: float = 1.0
    pos_init: str = "sincos"      # or "normal" (std 0.02)
    dtype: str = "float32"

    @property
    def grid(self) -> int:
        return self.volume_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 3

    @property
    def patch_voxels(self) -> int:
        return self.patch_size ** 3

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.d_model / 16)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> "ModelConfig":
        if self.volume_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide volume_size {self.volume_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads {self.heads} does not divide d_model {self.d_model}")
        if self.discretization not in ("zoh", "euler"):
            raise ConfigError(f"discretization must be zoh or euler, got {self.discretization!r}")
        if self.recon_scope not in ("masked", "full"):
            raise ConfigError(f"recon_scope must be masked or full, got {self.recon_scope!r}")
        if self.pos_init not in ("sincos", "normal"):
            raise ConfigError(f"pos_init must be sincos or normal, got {self.pos_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ConfigError("need 0 < dt_min <= dt_max")
        return self


STAGE_LR = {"pretrain1": 0.005, "pretrain2": 0.0005, "finetune": 0.001}
STAGE_EPOCHS = {"pretrain1": 1600, "pretrain2": 500, "finetune": 300}


@dataclass
class TrainConfig:
    stage: str = "pretrain1"
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 0.0          # 0 -> stage default
    weight_decay: float = 0.05
    alpha: float = 0.005
    lambda_inter: float = 0.2
    ema_momentum: float = 0.999
    mask_ratio: float = 0.75
    focal_gamma: float = 3.0
    seed: int = 0
    max_steps: int = 0            # 0 -> epochs * batches
    warmup_steps: int = 0
    grad_clip: float = 0.0        # 0 -> off; global-norm clipping otherwise
    fresh_moments: bool = True    # reset AdamW moments when a stage starts from another stage's checkpoint
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def lr(self) -> float:
        return self.base_lr or STAGE_LR[self.stage]

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGE_LR:
            raise ConfigError(f"stage must be one of {sorted(STAGE_LR)}, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be > 0 and weight decay >= 0")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        return self


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, model: ModelConfig | None = None,
                 train: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    model = dataclasses.replace(model) if model else ModelConfig()
    train = dataclasses.replace(train) if train else TrainConfig()
    mf, tf = _fields(ModelConfig), _fields(TrainConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in mf:
            setattr(model, key, _coerce(key, raw, mf[key].type))
        elif key in tf:
            setattr(train, key, _coerce(key, raw, tf[key].type))
        else:
            raise ConfigError(f"unknown config key: {key}")
    return model.validate(), train.validate()


def load_config(path: str | Path, **kw) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"), **kw)


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(model).items()]
    lines += [f"{k} = {_fmt(v)}" for k, v in dataclasses.asdict(train).items()]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


PRESET_DIR = Path(__file__).with_name("presets")


def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    path = PRESET_DIR / f"{name}.cfg"
    if not path.exists():
        raise ConfigError(f"no preset named {name!r}")
    return load_config(path)


def full_model_config() -> ModelConfig:
    """Full-scale shape: 64^3 volumes, width 192, twelve encoder layers."""
    return preset("full")[0]
