"""Transformer-encoder loss branch.

The final feature map (B, D_f, H_f, W_f) is read as a sequence of
S_f = H_f * W_f contextual vectors of length D_f (position (h, w) becomes
index h * W_f + w). A post-norm encoder stack processes the sequence, the
result is averaged over positions, and a linear layer (variant ``linear``)
or a margin head (variant ``metric``) produces class logits.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from tmloss.autodiff import Tensor, functional as F
from tmloss.config import EncoderConfig, HeadConfig
from tmloss.errors import ConfigurationError, DimensionError
from tmloss.heads import MarginHead
from tmloss.nn import LayerNorm, Linear, Module, uniform_fan_in


def to_sequence(fmap: Tensor) -> Tensor:
    """(B, D, H, W) -> (B, H*W, D), row-major over positions."""
    if fmap.ndim != 4:
        raise DimensionError(f"feature map must be (B, D, H, W), got {fmap.shape}")
    b, d, h, w = fmap.shape
    if h <= 1 or w <= 1:
        raise ValueError(f"feature map {h}x{w} cannot be split: height and width must exceed 1")
    return F.transpose(F.reshape(fmap, (b, d, h * w)), (0, 2, 1))


def from_sequence(seq: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`to_sequence`."""
    b, s, d = seq.shape
    if s != height * width:
        raise DimensionError(f"sequence length {s} != {height}x{width}")
    return F.reshape(F.transpose(seq, (0, 2, 1)), (b, d, height, width))


def mean_pool(seq: Tensor) -> Tensor:
    """Arithmetic mean over the S_f sequence positions."""
    return F.mean(seq, axis=1)


class MultiHeadAttention(Module):
    """Self-attention with one fused Q/K/V projection split across heads."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"model_dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        qkv = F.reshape(self.qkv(x), (b, s, 3, self.num_heads, self.head_dim))
        qkv = F.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, S, head_dim)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = F.reshape(F.transpose(F.matmul(weights, v), (0, 2, 1, 3)), (b, s, d))
        return self.out(ctx)


class EncoderLayer(Module):
    """Post-norm layer: LN(x + MHA(x)), then LN(x + FF(x)) with a ReLU feedforward."""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.attention = MultiHeadAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff_in = Linear(dim, ff_dim, rng)
        self.ff_out = Linear(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout = dropout
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        drop = lambda t: F.dropout(t, self.dropout, self._rng, self.training)  # noqa: E731
        x = self.norm1(x + drop(self.attention(x)))
        return self.norm2(x + drop(self.ff_out(F.relu(self.ff_in(x)))))


class TransformerEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        if config.model_dim is None or config.feedforward_dim is None:
            raise ConfigurationError("encoder config must be resolved against the feature depth first")
        self.config = config
        self.layers = [EncoderLayer(config.model_dim, config.num_heads, config.feedforward_dim,
                                    config.dropout, rng) for _ in range(config.num_layers)]

    def forward(self, seq: Tensor) -> Tensor:
        if seq.shape[-1] != self.config.model_dim:
            raise ConfigurationError(f"sequence width {seq.shape[-1]} != model_dim {self.config.model_dim}")
        for layer in self.layers:
            seq = layer(seq)
        return seq

    def attention_weights(self) -> list[np.ndarray]:
        return [layer.attention.last_weights for layer in self.layers]


class TransformerHead(Module):
    """Feature map -> sequence -> encoder -> mean -> class logits."""

    def __init__(self, config: EncoderConfig, feature_shape: tuple[int, int, int], num_classes: int,
                 variant: str, head_config: Optional[HeadConfig], rng: np.random.Generator):
        super().__init__()
        h, w, d = feature_shape
        self.config = config.resolved(d)
        self.variant = variant
        self.pos_embedding = (uniform_fan_in(rng, (h * w, d), d)
                              if self.config.positional_encoding == "learned" else None)
        self.encoder = TransformerEncoder(self.config, rng)
        if variant == "linear":
            self.classifier = Linear(d, num_classes, rng)
        elif variant == "metric":
            if head_config is None:
                raise ConfigurationError("metric variant needs a head config")
            self.classifier = MarginHead(d, num_classes, head_config, rng)
        else:
            raise ConfigurationError(f"unknown head variant {variant!r}")

    def encode(self, fmap: Tensor) -> Tensor:
        seq = to_sequence(fmap)
        if self.pos_embedding is not None:
            seq = seq + self.pos_embedding
        return self.encoder(seq)

    def forward(self, fmap: Tensor, labels=None) -> Tensor:
        pooled = mean_pool(self.encode(fmap))
        if self.variant == "linear":
            return self.classifier(pooled)
        if labels is None:
            raise ValueError("the metric head variant needs labels")
        return self.classifier(pooled, labels)
