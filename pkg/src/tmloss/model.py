"""The two-branch network: backbone, metric head (branch 1) and transformer head (branch 2)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from tmloss.autodiff import Tensor, no_grad
from tmloss.backbone import Backbone
from tmloss.config import ExperimentConfig
from tmloss.heads import MarginHead
from tmloss.nn import Module
from tmloss.transformer import TransformerHead


@dataclass
class BranchOutputs:
    feature_map: Tensor
    embedding: Tensor
    metric_logits: Tensor
    transformer_logits: Optional[Tensor]


class TransformerMetricModel(Module):
    def __init__(self, config: ExperimentConfig, num_classes: int, seed: int):
        super().__init__()
        config.validate()
        rng = np.random.default_rng(seed)
        self.config = config
        self.num_classes = num_classes
        self.backbone = Backbone(config.backbone, rng)
        self.metric_head = MarginHead(config.backbone.embedding_dim, num_classes, config.head, rng)
        self.transformer_head = TransformerHead(config.encoder, config.backbone.final_map, num_classes,
                                                config.train.head_variant, config.head, rng)

    def forward(self, x: Tensor, labels, with_transformer: bool = True) -> BranchOutputs:
        fmap, emb = self.backbone(x)
        o_logits = self.metric_head(emb, labels)
        t_logits = self.transformer_head(fmap, labels) if with_transformer else None
        return BranchOutputs(fmap, emb, o_logits, t_logits)

    def embed(self, x: Tensor) -> Tensor:
        """Raw (unnormalised) evaluation embedding from branch 1."""
        return self.backbone(x)[1]

    def parameter_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        return {
            "embedding_linear": [n for n in names if n.startswith("backbone.embedding.")],
            "metric_head": [n for n in names if n.startswith("metric_head.")],
            "transformer": [n for n in names if n.startswith("transformer_head.")],
            "final_conv": [n for n in names
                           if n.startswith(f"backbone.blocks.{len(self.backbone.blocks) - 1}.conv2.")],
            "convolution_path": [n for n in names if n.startswith("backbone.")
                                 and not n.startswith("backbone.embedding")],
        }


def init_params(config: ExperimentConfig, num_classes: int, seed: int) -> TransformerMetricModel:
    return TransformerMetricModel(config, num_classes, seed)


def embed_images(model: TransformerMetricModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings of normalised (N, C, H, W) float input, unnormalised."""
    was_training = model.training
    model.eval()
    out = []
    dtype = model.backbone.stem_conv.weight.dtype
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model.embed(Tensor(images[start:start + batch_size].astype(dtype))).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.backbone.embedding_dim))

