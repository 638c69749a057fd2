"""Angular-margin classification heads (softmax, CosFace, ArcFace, AdaFace).

All kinds share the same pipeline: normalise embeddings and class weights,
take cosines, replace the target-class cosine by a margin function ``F`` and
multiply every logit by the scale ``s``.

* cosface: ``F = cos - m``
* arcface: ``F = cos(theta + m)``; once ``theta + m >= pi`` the monotone
  surrogate ``cos - m sin m`` is used instead (or, with ``easy_margin``, the
  margin is dropped whenever ``cos <= 0``).
* adaface: ``F = cos(theta + g_angle) - g_add`` with ``g_angle = -m n``,
  ``g_add = m n + m`` where ``n`` in [-1, 1] is the embedding norm
  standardised by running batch statistics (``(norm - mu) / (sigma / h)``).
  The norm statistics carry no gradient.
* softmax: scaled cosines, margin ignored.

Angles are never materialised: ``cos(theta + a) = cos cos(a) - sin sin(a)``
with ``sin = sqrt(1 - cos^2)``, which keeps ``m = 0`` bit-exact.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from tmloss.autodiff import Tensor, functional as F
from tmloss.config import HeadConfig, LOSS_KINDS
from tmloss.errors import ConfigurationError
from tmloss.nn import Module, uniform_fan_in

COS_EPS = 1e-7


def cosine_logits(emb: Tensor, class_weights: Tensor) -> Tensor:
    """cos(theta_j) between each embedding row and each class-weight row."""
    e = F.l2_normalize(emb, axis=-1)
    w = F.l2_normalize(class_weights, axis=-1)
    cos = F.matmul(e, F.transpose(w, (1, 0)))
    return F.clamp(cos, -1.0 + COS_EPS, 1.0 - COS_EPS)


def _sine(cos: Tensor) -> Tensor:
    """sqrt(1 - cos^2) with a zero (not infinite) derivative at |cos| = 1."""
    sin = np.sqrt(np.maximum(1.0 - cos.data * cos.data, 0.0)).astype(cos.dtype)
    safe = np.where(sin > 0, sin, 1.0)

    def backward(g):
        return (np.where(sin > 0, -g * cos.data / safe, 0.0).astype(cos.dtype),)

    return Tensor._from_op(sin, (cos,), backward, "sine")


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range [0, {n})")
    mask = np.zeros((labels.size, n), dtype=bool)
    mask[np.arange(labels.size), labels] = True
    return mask


def margin_logits(cos: Tensor, labels, kind: str, scale: float, margin: float,
                  easy_margin: bool = False, norm_signal: Optional[np.ndarray] = None) -> Tensor:
    """Scaled logits with the kind's margin function applied to target columns.

    ``norm_signal`` is the per-row standardised norm ``n`` (adaface only).
    """
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown margin kind {kind!r}")
    if kind == "softmax":
        return F.scale(cos, scale)
    mask = _one_hot(labels, cos.shape[1])
    if kind == "cosface":
        target = F.sub(cos, margin)
    elif kind == "arcface":
        sin = _sine(cos)
        rotated = F.sub(F.scale(cos, math.cos(margin)), F.scale(sin, math.sin(margin)))
        if easy_margin:
            target = F.where(cos.data > 0, rotated, cos)
        else:
            fallback = F.sub(cos, margin * math.sin(margin))
            # theta + m < pi  <=>  cos(theta) > cos(pi - m)
            target = F.where(cos.data > math.cos(math.pi - margin), rotated, fallback)
    else:
        if norm_signal is None:
            raise ValueError("adaface margins need the standardised norm signal")
        dtype = cos.dtype
        g_angle = (-margin * np.asarray(norm_signal)).astype(dtype).reshape(-1, 1)
        g_add = (margin * np.asarray(norm_signal) + margin).astype(dtype).reshape(-1, 1)
        sin = _sine(cos)
        rotated = F.sub(F.mul(cos, np.cos(g_angle)), F.mul(sin, np.sin(g_angle)))
        fallback = F.sub(cos, g_angle * np.sin(g_angle))
        past_pi = (g_angle > 0) & (cos.data <= np.cos(np.pi - g_angle))
        target = F.sub(F.where(~past_pi, rotated, fallback), g_add)
    return F.scale(F.where(mask, target, cos), scale)


class MarginHead(Module):
    """Class-weight matrix (N_c x dim) plus margin hyperparameters."""

    def __init__(self, in_dim: int, num_classes: int, config: HeadConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.kind = config.kind
        self.scale = float(config.scale)
        self.margin = config.resolved_margin
        self.easy_margin = config.easy_margin
        self.h = config.adaface_h
        self.stat_momentum = config.adaface_momentum
        self.update_stats = True
        self.class_weights = uniform_fan_in(rng, (num_classes, in_dim), in_dim)
        if self.kind == "adaface":
            # initial values follow the reference AdaFace implementation
            self.buffers["norm_mean"] = np.array([20.0])
            self.buffers["norm_std"] = np.array([100.0])

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]

    def norm_signal(self, emb: Tensor) -> np.ndarray:
        norms = np.linalg.norm(emb.data.astype(np.float64), axis=1).clip(1e-3, 100.0)
        if self.training and self.update_stats and norms.size > 1:
            mom = self.stat_momentum
            self.buffers["norm_mean"] *= 1 - mom
            self.buffers["norm_mean"] += mom * norms.mean()
            self.buffers["norm_std"] *= 1 - mom
            self.buffers["norm_std"] += mom * norms.std(ddof=1)
        mu = self.buffers["norm_mean"][0]
        sigma = self.buffers["norm_std"][0]
        return np.clip((norms - mu) / (sigma + 1e-3) * self.h, -1.0, 1.0)

    def cosine_logits(self, emb: Tensor) -> Tensor:
        return cosine_logits(emb, self.class_weights)

    def forward(self, emb: Tensor, labels) -> Tensor:
        cos = self.cosine_logits(emb)
        signal = self.norm_signal(emb) if self.kind == "adaface" else None
        return margin_logits(cos, labels, self.kind, self.scale, self.margin, self.easy_margin, signal)


def metric_loss(emb: Tensor, labels, head: MarginHead) -> Tensor:
    """Cross-entropy over the margin logits of ``head``."""
    return F.cross_entropy(head(emb, labels), labels)
