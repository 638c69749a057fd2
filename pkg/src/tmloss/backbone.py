"""Small residual CNN: produces the final feature map and the evaluation embedding.

Layout: a stride-1 3x3 stem (conv-BN-PReLU) followed by one stage per entry
of ``stage_channels``. The first block of each stage has stride 2, so every
stage halves the spatial size. The last stage's output is the final feature
map; flattening it (channel-major, then row, then column) and applying one
affine map gives the embedding.
"""

from __future__ import annotations

import numpy as np

from tmloss.autodiff import Tensor, functional as F
from tmloss.config import BackboneConfig
from tmloss.errors import DimensionError
from tmloss.nn import BatchNorm, Conv2d, Linear, Module, PReLU


class ResidualBlock(Module):
    """``x + body(x)`` where body is (conv3x3-BN-PReLU) twice.

    A projection shortcut (1x1 conv + BN) replaces the identity when the block
    changes stride or width.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(out_channels)
        self.act1 = PReLU(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm(out_channels)
        self.act2 = PReLU(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride)
            self.shortcut_bn = BatchNorm(out_channels)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        body = self.act1(self.bn1(self.conv1(x)))
        body = self.act2(self.bn2(self.conv2(body)))
        if self.shortcut_conv is None:
            return x + body
        return self.shortcut_bn(self.shortcut_conv(x)) + body


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        in_ch = config.input_size[0]
        width = config.stage_channels[0]
        self.stem_conv = Conv2d(in_ch, width, 3, rng, stride=1, padding=1)
        self.stem_bn = BatchNorm(width)
        self.stem_act = PReLU(width)
        self.blocks: list[ResidualBlock] = []
        for channels, count in zip(config.stage_channels, config.blocks_per_stage):
            for i in range(count):
                self.blocks.append(ResidualBlock(width, channels, 2 if i == 0 else 1, rng))
                width = channels
        h, w, d = config.final_map
        self.embedding = Linear(d * h * w, config.embedding_dim, rng)
        self.embedding_bn = BatchNorm(config.embedding_dim) if config.embedding_bn else None

    @property
    def final_conv(self) -> Conv2d:
        """Last convolution before the branch split."""
        return self.blocks[-1].conv2

    def feature_map(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != tuple(self.config.input_size):
            raise DimensionError(f"input {x.shape} does not match configured size {self.config.input_size}")
        out = self.stem_act(self.stem_bn(self.stem_conv(x)))
        for block in self.blocks:
            out = block(out)
        return out

    def embed(self, fmap: Tensor) -> Tensor:
        """Flatten + affine map to the embedding (no activation afterwards)."""
        flat = F.reshape(fmap, (fmap.shape[0], -1))
        emb = self.embedding(flat)
        if self.embedding_bn is not None:
            emb = self.embedding_bn(emb)
        return emb

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (feature map, embedding) from one shared pass."""
        fmap = self.feature_map(x)
        return fmap, self.embed(fmap)


def init_backbone(config: BackboneConfig, seed: int) -> Backbone:
    return Backbone(config, np.random.default_rng(seed))
