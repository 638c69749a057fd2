"""Finite-difference checks over every differentiable op plus the full branch composites.

Each item builds float64 inputs with entries in [-2, 2] (positive ranges for
log/sqrt), contracts the op output with a fixed random tensor to a scalar and
compares the backward pass with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from tmloss.autodiff import Tensor, functional as F, grad_check, precision

OP_TOL = 1e-5
NORM_TOL = 1e-4
COMPOSITE_TOL = 1e-4


@dataclass
class CheckItem:
    name: str
    tolerance: float
    run: Callable[[], float]


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _rand(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _contract(out: Tensor, seed: int = 99) -> Tensor:
    r = np.random.default_rng(seed).uniform(-1, 1, size=out.shape)
    return F.sum(F.mul(out, r))


def _unary(op, lo=-2.0, hi=2.0, shape=(3, 4)) -> Callable[[], float]:
    def run():
        rng = np.random.default_rng(1)
        x = _rand(rng, *shape, lo=lo, hi=hi)
        return grad_check(lambda x: _contract(op(x)), [x])
    return run


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), lo_b=-2.0) -> Callable[[], float]:
    def run():
        rng = np.random.default_rng(2)
        a, b = _rand(rng, *shape_a), _rand(rng, *shape_b, lo=lo_b)
        return grad_check(lambda a, b: _contract(op(a, b)), [a, b])
    return run


def _prelu():
    rng = np.random.default_rng(3)
    x, s = _rand(rng, 2, 3, 4, 4), _rand(rng, 3, lo=0.05, hi=0.5)
    return grad_check(lambda x, s: _contract(F.prelu(x, s)), [x, s])


def _clamp():
    rng = np.random.default_rng(4)
    x = Tensor(rng.choice([-1.7, -1.3, -0.6, -0.2, 0.3, 0.8, 1.4, 1.9], size=(3, 4))
               + rng.uniform(-0.05, 0.05, size=(3, 4)), requires_grad=True)
    return grad_check(lambda x: _contract(F.clamp(x, -1.0, 1.0)), [x])


def _conv2d():
    rng = np.random.default_rng(5)
    x, w, b = _rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    return grad_check(lambda x, w, b: _contract(F.conv2d(x, w, b, stride=2, padding=1)), [x, w, b])


def _linear():
    rng = np.random.default_rng(6)
    x, w, b = _rand(rng, 2, 3, 5), _rand(rng, 4, 5), _rand(rng, 4)
    return grad_check(lambda x, w, b: _contract(F.linear(x, w, b)), [x, w, b])


def _matmul():
    rng = np.random.default_rng(7)
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    return grad_check(lambda a, b: _contract(F.matmul(a, b)), [a, b])


def _cross_entropy():
    rng = np.random.default_rng(8)
    x, w = _rand(rng, 4, 5), _rand(rng, 5, 3)
    y = np.array([0, 2, 1, 2])
    return grad_check(lambda x, w: F.cross_entropy(F.matmul(x, w), y), [x, w])


def _layernorm():
    rng = np.random.default_rng(9)
    x, g, b = _rand(rng, 2, 3, 6), _rand(rng, 6), _rand(rng, 6)
    return grad_check(lambda x, g, b: _contract(F.layernorm(x, g, b)), [x, g, b])


def _batchnorm(shape):
    def run():
        rng = np.random.default_rng(10)
        x, g, b = _rand(rng, *shape), _rand(rng, shape[1]), _rand(rng, shape[1])
        rm, rv = np.zeros(shape[1]), np.ones(shape[1])
        return grad_check(lambda x, g, b: _contract(F.batchnorm(x, g, b, rm, rv, training=True)), [x, g, b])
    return run


def _concat():
    rng = np.random.default_rng(11)
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 4)
    return grad_check(lambda a, b: _contract(F.concat([a, b], axis=1)), [a, b])


def _max():
    rng = np.random.default_rng(12)
    x = Tensor(rng.permutation(24).reshape(4, 6) / 6.0 - 2.0, requires_grad=True)
    return grad_check(lambda x: _contract(F.max(x, axis=1)), [x])


# --------------------------------------------------------------------------
# composites on a tiny two-branch model
# --------------------------------------------------------------------------

def tiny_config(kind: str = "arcface", variant: str = "linear"):
    from tmloss.config import BackboneConfig, EncoderConfig, ExperimentConfig, HeadConfig, TrainConfig

    return ExperimentConfig(
        backbone=BackboneConfig(input_size=(3, 8, 8), stage_channels=[4, 6], blocks_per_stage=[1, 1],
                                embedding_dim=5),
        encoder=EncoderConfig(num_layers=1, num_heads=2, feedforward_dim=12),
        head=HeadConfig(kind=kind),
        train=TrainConfig(head_variant=variant),
    )


def _tiny_model(kind="arcface", variant="linear", seed=0):
    from tmloss.model import TransformerMetricModel

    with precision(np.float64):
        model = TransformerMetricModel(tiny_config(kind, variant), num_classes=3, seed=seed)
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, size=(2, 3, 8, 8))
    y = np.array([0, 2])
    return model, x, y


def _model_check(loss_fn: Callable, kind="arcface", variant="linear", with_input=True) -> float:
    model, x, y = _tiny_model(kind, variant)
    for m in model.modules():
        if hasattr(m, "update_stats"):
            m.update_stats = False
    xt = Tensor(x, requires_grad=True)
    params = model.parameters()
    inputs = ([xt] if with_input else []) + params

    def f(*_):
        return loss_fn(model, xt, y)

    return grad_check(f, inputs)


def _metric_branch(model, x, y):
    _, emb = model.backbone(x)
    return F.cross_entropy(model.metric_head(emb, y), y)


def _transformer_branch(model, x, y):
    fmap, _ = model.backbone(x)
    return F.cross_entropy(model.transformer_head(fmap, y), y)


def _combined(model, x, y):
    from tmloss.trainer import combined_loss

    out = model(x, y)
    return combined_loss(out.metric_logits, out.transformer_logits, y, 0.4)


def _summed(model, x, y):
    from tmloss.trainer import summed_logits_loss

    out = model(x, y)
    return summed_logits_loss(out.metric_logits, out.transformer_logits, y)


def _margin_head(kind: str) -> Callable[[], float]:
    def run():
        from tmloss.config import HeadConfig
        from tmloss.heads import MarginHead, cosine_logits, margin_logits

        rng = np.random.default_rng(14)
        with precision(np.float64):
            head = MarginHead(4, 3, HeadConfig(kind=kind), rng)
        head.update_stats = False
        emb = _rand(rng, 2, 4)
        y = np.array([1, 2])
        if kind != "adaface":
            return grad_check(lambda e, w: F.cross_entropy(head(e, y), y), [emb, head.class_weights])
        # the norm signal is a stop-gradient quantity, so it is frozen at the
        # unperturbed embedding; stats are centred so the signal is non-trivial
        norms = np.linalg.norm(emb.data, axis=1)
        head.buffers["norm_mean"][:] = norms.mean()
        head.buffers["norm_std"][:] = 0.5
        signal = head.norm_signal(emb)

        def f(e, w):
            cos = cosine_logits(e, w)
            return F.cross_entropy(margin_logits(cos, y, kind, head.scale, head.margin, norm_signal=signal), y)

        return grad_check(f, [emb, head.class_weights])
    return run


def suite() -> list[CheckItem]:
    items = [
        CheckItem("add", OP_TOL, _binary(F.add, (3, 4), (4,))),
        CheckItem("sub", OP_TOL, _binary(F.sub, (3, 4), (3, 1))),
        CheckItem("mul", OP_TOL, _binary(F.mul)),
        CheckItem("div", OP_TOL, _binary(F.div, lo_b=0.5)),
        CheckItem("scale", OP_TOL, _unary(lambda x: F.scale(x, -2.5))),
        CheckItem("relu", OP_TOL, _unary(F.relu)),
        CheckItem("prelu", OP_TOL, _prelu),
        CheckItem("exp", OP_TOL, _unary(F.exp)),
        CheckItem("log", OP_TOL, _unary(F.log, lo=0.2)),
        CheckItem("sqrt", OP_TOL, _unary(F.sqrt, lo=0.2)),
        CheckItem("clamp", OP_TOL, _clamp),
        CheckItem("matmul", OP_TOL, _matmul),
        CheckItem("linear", OP_TOL, _linear),
        CheckItem("conv2d", OP_TOL, _conv2d),
        CheckItem("sum", OP_TOL, _unary(lambda x: F.sum(x, axis=1))),
        CheckItem("mean", OP_TOL, _unary(lambda x: F.mean(x, axis=0, keepdims=True))),
        CheckItem("max", OP_TOL, _max),
        CheckItem("softmax", OP_TOL, _unary(lambda x: F.softmax(x, axis=-1))),
        CheckItem("log_softmax", OP_TOL, _unary(lambda x: F.log_softmax(x, axis=-1))),
        CheckItem("cross_entropy", OP_TOL, _cross_entropy),
        CheckItem("l2_normalize", OP_TOL, _unary(F.l2_normalize)),
        CheckItem("reshape", OP_TOL, _unary(lambda x: F.reshape(x, (2, 6)))),
        CheckItem("transpose", OP_TOL, _unary(lambda x: F.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
        CheckItem("concat", OP_TOL, _concat),
        CheckItem("getitem", OP_TOL, _unary(lambda x: x[1:, ::2])),
        CheckItem("layernorm", NORM_TOL, _layernorm),
        CheckItem("batchnorm2d", NORM_TOL, _batchnorm((3, 2, 3, 3))),
        CheckItem("batchnorm1d", NORM_TOL, _batchnorm((4, 3))),
        CheckItem("head_softmax", COMPOSITE_TOL, _margin_head("softmax")),
        CheckItem("head_cosface", COMPOSITE_TOL, _margin_head("cosface")),
        CheckItem("head_arcface", COMPOSITE_TOL, _margin_head("arcface")),
        CheckItem("head_adaface", COMPOSITE_TOL, _margin_head("adaface")),
        CheckItem("metric_branch", COMPOSITE_TOL, lambda: _model_check(_metric_branch)),
        CheckItem("transformer_branch", COMPOSITE_TOL, lambda: _model_check(_transformer_branch)),
        CheckItem("transformer_metric_branch", COMPOSITE_TOL,
                  lambda: _model_check(_transformer_branch, variant="metric")),
        CheckItem("combined_loss", COMPOSITE_TOL, lambda: _model_check(_combined)),
        CheckItem("summed_logits", COMPOSITE_TOL, lambda: _model_check(_summed)),
    ]
    return items


def run_suite(only: Optional[Sequence[str]] = None) -> list[CheckResult]:
    items = suite()
    if only:
        unknown = set(only) - {i.name for i in items}
        if unknown:
            raise KeyError(f"unknown gradcheck items: {sorted(unknown)}")
        items = [i for i in items if i.name in set(only)]
    results = []
    for item in items:
        t0 = time.perf_counter()
        err = item.run()
        results.append(CheckResult(item.name, item.tolerance, err, time.perf_counter() - t0))
    return results
