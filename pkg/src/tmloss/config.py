"""Experiment configuration: dataclasses plus their JSON representation.

A config file is a JSON object with optional sections ``backbone``,
``encoder``, ``head`` and ``train``; keys inside each section are the field
names of the matching dataclass. Missing keys keep their defaults and
unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from tmloss.errors import ConfigurationError

LOSS_KINDS = ("softmax", "cosface", "arcface", "adaface")
DEFAULT_MARGINS = {"softmax": 0.0, "cosface": 0.35, "arcface": 0.45, "adaface": 0.4}
COMBINE_MODES = ("weighted", "summed_logits", "metric_only")
HEAD_VARIANTS = ("linear", "metric")
POSITIONAL_ENCODINGS = ("none", "learned")


def conv_out(size: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class BackboneConfig:
    input_size: tuple[int, int, int] = (3, 32, 32)
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1])
    embedding_dim: int = 64
    embedding_bn: bool = False

    @property
    def final_map(self) -> tuple[int, int, int]:
        """(H_f, W_f, D_f) of the last stage: stride-1 stem, stride-2 entry per stage."""
        _, h, w = self.input_size
        for _ in self.stage_channels:
            h, w = conv_out(h, stride=2), conv_out(w, stride=2)
        return h, w, self.stage_channels[-1]

    @property
    def sequence_length(self) -> int:
        h, w, _ = self.final_map
        return h * w

    def validate(self) -> None:
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigurationError(f"input_size must be (channels, height, width), got {self.input_size}")
        if not self.stage_channels or len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigurationError("stage_channels and blocks_per_stage must be nonempty and equally long")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigurationError("stage widths and block counts must be positive")
        if self.embedding_dim < 1:
            raise ConfigurationError(f"embedding_dim must be positive, got {self.embedding_dim}")
        h, w, _ = self.final_map
        if h <= 1 or w <= 1:
            raise ConfigurationError(
                f"final feature map is {h}x{w}; the branch split needs height > 1 and width > 1")


@dataclass
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: Optional[int] = None
    feedforward_dim: Optional[int] = None
    dropout: float = 0.0
    positional_encoding: str = "none"

    def resolved(self, feature_depth: int) -> "EncoderConfig":
        """Copy with ``model_dim`` bound to the feature depth and ff width filled in."""
        model_dim = self.model_dim or feature_depth
        if model_dim != feature_depth:
            raise ConfigurationError(f"encoder model_dim {model_dim} != feature map depth {feature_depth}")
        ff = self.feedforward_dim or 4 * model_dim
        return dataclasses.replace(self, model_dim=model_dim, feedforward_dim=ff)

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigurationError("encoder needs at least one layer and one head")
        if self.model_dim is not None and self.model_dim % self.num_heads:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.positional_encoding not in POSITIONAL_ENCODINGS:
            raise ConfigurationError(f"positional_encoding must be one of {POSITIONAL_ENCODINGS}")


@dataclass
class HeadConfig:
    kind: str = "arcface"
    scale: float = 64.0
    margin: Optional[float] = None
    easy_margin: bool = False
    adaface_h: float = 0.33
    adaface_momentum: float = 0.01

    @property
    def resolved_margin(self) -> float:
        return DEFAULT_MARGINS[self.kind] if self.margin is None else float(self.margin)

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        m = self.resolved_margin
        upper = math.pi / 2 if self.kind == "arcface" else 1.0
        if self.kind != "softmax" and not 0.0 <= m < upper:
            raise ConfigurationError(f"margin {m} outside [0, {upper:.4g}) for {self.kind}")


@dataclass
class TrainConfig:
    alpha: float = 0.4
    combine_mode: str = "weighted"
    head_variant: str = "linear"
    lr0: float = 0.1
    lr_drop_epochs: list[int] = field(default_factory=lambda: [10, 18, 22])
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    deterministic: bool = False
    flip: bool = True
    holdout_fraction: float = 0.2
    eval_every: int = 1
    eval_pairs: int = 500
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigurationError(f"combine_mode must be one of {COMBINE_MODES}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigurationError(f"head_variant must be one of {HEAD_VARIANTS}")
        if self.combine_mode == "weighted" and not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1) in weighted mode, got {self.alpha}")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigurationError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch normalisation)")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        self.backbone.validate()
        self.encoder.resolved(self.backbone.final_map[2]).validate()
        self.encoder.validate()
        self.head.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, section_cls in (("backbone", BackboneConfig), ("encoder", EncoderConfig),
                                  ("head", HeadConfig), ("train", TrainConfig)):
            values = dict(raw.get(name, {}))
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigurationError(f"unknown keys in section {name!r}: {sorted(bad)}")
            if "input_size" in values:
                values["input_size"] = tuple(values["input_size"])
            parts[name] = section_cls(**values)
        return cls(**parts)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
