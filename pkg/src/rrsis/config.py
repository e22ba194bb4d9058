"""Flat ``key=value`` run configuration with dotted keys.

Every key has a typed default; unknown keys are rejected. Files contain one
``key=value`` per line, ``#`` starts a comment, and CLI ``--set`` overrides
use the same syntax.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import torch

from .bhfm import FusionCoeffs, FusionVariant
from .data import SynthConfig
from .image_encoder import EncoderStageConfig
from .losses import LossWeights
from .union_encoder import UnionConfig

VERIFY_ENV = "RS2_VERIFY"

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "verify": False,
    # union encoder (reference scale: 224x224, p=16, D=1024)
    "union.image_size": 64,
    "union.patch_size": 8,
    "union.dim": 32,
    "union.depth": 2,
    "union.heads": 4,
    "union.max_text_len": 12,
    # hierarchical image encoder (reference scale: 1024x1024, C=256)
    "encoder.image_size": 128,
    "encoder.widths": (16, 32, 64, 64),
    "encoder.blocks": (1, 1, 1, 1),
    "encoder.heads": (1, 2, 4, 4),
    "encoder.out_dim": 32,
    "encoder.frozen": False,
    "text.dim": 32,
    # prompt encoder / mask decoder
    "head.heads": 2,
    "head.hyper_dim": 8,
    "head.high_res": True,
    "head.pixel_skip": True,
    # fusion
    "bhfm.variant": "bi",
    "bhfm.use_bc": True,
    "bhfm.use_bl": True,
    "bhfm.alpha_t": 0.2,
    "bhfm.alpha_i": 0.5,
    "mpg.enabled": True,
    "mpg.use_mhca": True,
    "mpg.heads": 1,
    # loss weights
    "loss.ce": 1.0,
    "loss.dice": 0.1,
    "loss.tbl": 0.2,
    # optimiser; reference schedule: base 5e-5, fusion/MPG 1e-4, x0.1 for the
    # last 10 of 60 epochs. Step budgets replace epochs at this scale.
    "optim.lr": 5e-4,
    "optim.lr_fusion": 1e-3,
    "optim.fusion_groups": ("bhfm", "mpg"),
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.weight_decay": 0.01,
    "optim.steps": 300,
    "optim.decay_last": 50,
    "optim.decay_factor": 0.1,
    "optim.warmup": 0,
    "optim.clip_norm": 0.0,
    "train.checkpoint_every": 100,
    # synthetic data
    "data.canvas": 128,
    "data.min_distractors": 2,
    "data.max_distractors": 4,
    "data.side_prob": 0.35,
    "data.contrast": 0.75,
    "data.noise": 0.03,
    # ablation budget
    "ablate.steps": 150,
    "ablate.decay_last": 25,
}


class ConfigError(ValueError):
    pass


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(type(default[0])(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            self._values[key] = _parse(key, value) if isinstance(value, str) else value
        self.validate()

    def __getitem__(self, key: str):
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def items(self):
        return self._values.items()

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown config key: {key}")
            values[key] = _parse(key, raw)
        return cls(values)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls.from_text(Path(path).read_text(encoding="utf-8"), str(path)) if path else cls()
        return cfg.with_overrides(overrides)

    def with_overrides(self, overrides) -> "RunConfig":
        values = dict(self._values)
        for item in overrides:
            if isinstance(item, str):
                if "=" not in item:
                    raise ConfigError(f"override must be key=value, got {item!r}")
                key, raw = (part.strip() for part in item.split("=", 1))
            else:
                key, raw = item
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _parse(key, raw) if isinstance(raw, str) else raw
        return RunConfig(values)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self._values.items())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.union_config()
            self.encoder_config()
            self.fusion_variant()
            self.fusion_coeffs()
            self.loss_weights()
            self.synth_config()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self["data.canvas"] != self["encoder.image_size"]:
            raise ConfigError("data.canvas must equal encoder.image_size")
        if self["data.canvas"] % self["union.image_size"]:
            raise ConfigError("data.canvas must be a multiple of union.image_size")
        if self["encoder.out_dim"] % self["head.heads"]:
            raise ConfigError("encoder.out_dim must be divisible by head.heads")
        if self["union.dim"] % self["mpg.heads"] or self["union.dim"] % 2:
            raise ConfigError("union.dim must be even and divisible by mpg.heads")
        for group in self["optim.fusion_groups"]:
            if group not in ("union", "encoder", "bhfm", "mpg", "prompt", "decoder", "text_weight"):
                raise ConfigError(f"optim.fusion_groups names unknown module {group!r}")

    # typed views -----------------------------------------------------------

    def union_config(self, vocab_size: int = 64) -> UnionConfig:
        return UnionConfig(self["union.image_size"], self["union.patch_size"], self["union.dim"],
                           self["union.depth"], self["union.heads"], vocab_size,
                           self["union.max_text_len"])

    def encoder_config(self) -> EncoderStageConfig:
        return EncoderStageConfig(self["encoder.image_size"], self["encoder.widths"],
                                  self["encoder.blocks"], self["encoder.heads"],
                                  self["encoder.out_dim"], self["encoder.frozen"])

    def fusion_variant(self) -> FusionVariant:
        variant = self["bhfm.variant"]
        if variant not in ("bi", "uni", "linear", "off"):
            raise ValueError(f"bhfm.variant must be one of bi, uni, linear, off; got {variant!r}")
        return FusionVariant(variant, self["bhfm.use_bc"], self["bhfm.use_bl"])

    def fusion_coeffs(self) -> FusionCoeffs:
        return FusionCoeffs(self["bhfm.alpha_t"], self["bhfm.alpha_i"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["loss.ce"], self["loss.dice"], self["loss.tbl"])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self["data.canvas"], self["data.min_distractors"],
                           self["data.max_distractors"], self["data.side_prob"],
                           self["data.contrast"], self["data.noise"])

    @property
    def verify(self) -> bool:
        return bool(self["verify"]) or os.environ.get(VERIFY_ENV, "") not in ("", "0")


def apply_mode(cfg: RunConfig) -> torch.dtype:
    """Set global numeric mode; verification mode is float64 on one thread."""
    torch.use_deterministic_algorithms(cfg.verify)
    if cfg.verify:
        torch.set_num_threads(1)
        dtype = torch.float64
    else:
        dtype = torch.float32
    torch.set_default_dtype(dtype)
    return dtype
