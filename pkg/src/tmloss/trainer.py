"""Loss combination, SGD with momentum, the training loop and branch-isolation checks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from tmloss.autodiff import Tensor, functional as F
from tmloss.checkpoint import save_checkpoint
from tmloss.config import ExperimentConfig, TrainConfig
from tmloss.data import LabeledDataset, PairList, flip_batch, normalize
from tmloss.errors import DimensionError, IntegrityError, NumericalError, StructuralError
from tmloss.model import BranchOutputs, TransformerMetricModel

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "loss_total", "loss_metric", "loss_transformer", "alpha", "wallclock_s"]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _check_pair(o_logits: Tensor, t_logits: Tensor) -> None:
    if o_logits.shape != t_logits.shape:
        raise DimensionError(f"branch logits differ in shape: {o_logits.shape} vs {t_logits.shape}")


def combined_loss(o_logits: Tensor, t_logits: Tensor, labels, alpha: float) -> Tensor:
    """(1 - alpha) * CE(metric logits) + alpha * CE(transformer logits)."""
    _check_pair(o_logits, t_logits)
    return F.add(F.scale(F.cross_entropy(o_logits, labels), 1.0 - alpha),
                 F.scale(F.cross_entropy(t_logits, labels), alpha))


def summed_logits_loss(o_logits: Tensor, t_logits: Tensor, labels) -> Tensor:
    """CE of the summed branch logits (add first, softmax once)."""
    _check_pair(o_logits, t_logits)
    return F.cross_entropy(F.add(o_logits, t_logits), labels)


@dataclass
class LossTerms:
    total: Tensor
    metric: float
    transformer: Optional[float]


def branch_loss(out: BranchOutputs, labels, mode: str, alpha: float) -> LossTerms:
    metric_ce = F.cross_entropy(out.metric_logits, labels)
    if mode == "metric_only":
        return LossTerms(metric_ce, metric_ce.item(), None)
    t_ce = F.cross_entropy(out.transformer_logits, labels)
    if mode == "weighted":
        total = F.add(F.scale(metric_ce, 1.0 - alpha), F.scale(t_ce, alpha))
    elif mode == "summed_logits":
        total = summed_logits_loss(out.metric_logits, out.transformer_logits, labels)
    else:
        raise ValueError(f"unknown combine mode {mode!r}")
    return LossTerms(total, metric_ce.item(), t_ce.item())


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

def lr_at_epoch(epoch: int, lr0: float = 0.1, drops=(10, 18, 22), factor: float = 10.0) -> float:
    """Step schedule; a drop named ``e`` applies from the start of 1-based epoch ``e``."""
    return lr0 / factor ** sum(1 for d in drops if d <= epoch)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    lr: float = 0.0


def sgd_step(params: dict[str, Tensor], state: OptimizerState, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum * v + (grad + wd * param);  param <- param - lr * v."""
    for name, p in params.items():
        if p.grad is None:
            raise IntegrityError(f"parameter {name} has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise IntegrityError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    state.step += 1
    state.lr = lr


def trainable_parameters(model: TransformerMetricModel, mode: str) -> dict[str, Tensor]:
    params = dict(model.named_parameters())
    if mode == "metric_only":
        params = {n: p for n, p in params.items() if not n.startswith("transformer_head.")}
    return params


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss_total: float
    loss_metric: float
    loss_transformer: Optional[float]
    alpha: float
    wallclock_s: float
    val_accuracy: Optional[float] = None


@dataclass
class TrainResult:
    model: TransformerMetricModel
    history: list[EpochRecord]
    checkpoints: list[Path]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow([_fmt(getattr(r, c)) for c in LOG_COLUMNS])


def write_validation_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "accuracy"])
        for r in history:
            if r.val_accuracy is not None:
                w.writerow([r.epoch, repr(r.val_accuracy)])


def checkpoint_meta(config: ExperimentConfig, model: TransformerMetricModel, epoch: int,
                    class_names: Optional[list[str]] = None) -> dict:
    return {"config": config.to_dict(), "num_classes": model.num_classes, "epoch": epoch,
            "class_names": class_names or []}


def _batch_stats(x: np.ndarray, out: Optional[BranchOutputs]) -> str:
    parts = [f"input mean={x.mean():.4g} std={x.std():.4g}"]
    if out is not None:
        for name in ("feature_map", "embedding", "metric_logits", "transformer_logits"):
            t = getattr(out, name)
            if t is not None:
                d = t.data
                finite = np.isfinite(d)
                absmax = float(np.abs(d[finite]).max()) if finite.any() else float("nan")
                parts.append(f"{name}: finite={finite.mean():.3f} absmax(finite)={absmax:.4g}")
    return "; ".join(parts)


def train(config: ExperimentConfig, train_set: LabeledDataset, out_dir=None,
          holdout: Optional[LabeledDataset] = None, pairs: Optional[PairList] = None,
          model: Optional[TransformerMetricModel] = None,
          progress: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train the two-branch model; write log CSVs and checkpoints into ``out_dir``.

    An epoch-0 checkpoint is always written (before any update), then one
    every ``checkpoint_every`` epochs and a final one. Verification accuracy
    on ``pairs`` is computed every ``eval_every`` epochs when given.
    """
    from tmloss.evaluation import embed_dataset, verification_accuracy

    config.validate()
    tc: TrainConfig = config.train
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model = model or TransformerMetricModel(config, train_set.class_count, tc.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    checkpoints: list[Path] = []

    def save(epoch: int, name: str):
        if ckpt_dir is not None:
            checkpoints.append(save_checkpoint(ckpt_dir / name, model.state_dict(),
                                               checkpoint_meta(config, model, epoch, train_set.class_names)))

    save(0, "epoch_000.ckpt")
    params = trainable_parameters(model, tc.combine_mode)
    state = OptimizerState()
    rng = np.random.default_rng(tc.seed + 1)
    with_transformer = tc.combine_mode != "metric_only"
    dtype = model.backbone.stem_conv.weight.dtype
    history: list[EpochRecord] = []
    start = time.perf_counter()
    n = len(train_set)

    for epoch in range(1, tc.epochs + 1):
        lr = lr_at_epoch(epoch, tc.lr0, tc.lr_drop_epochs, tc.lr_drop_factor)
        state.epoch = epoch
        model.train()
        order = rng.permutation(n)
        totals = np.zeros(3)
        seen = 0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            if len(idx) < 2:
                continue
            images = train_set.images[idx]
            if tc.flip:
                images = flip_batch(images, rng)
            x = normalize(images).astype(dtype, copy=False)
            y = train_set.labels[idx]
            out = None
            try:
                out = model(Tensor(x), y, with_transformer=with_transformer)
                terms = branch_loss(out, y, tc.combine_mode, tc.alpha)
            except FloatingPointError:
                terms = None
            if terms is None or not math.isfinite(terms.total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {state.step}: {_batch_stats(x, out)}")
            model.zero_grad()
            terms.total.backward()
            sgd_step(params, state, lr, tc.momentum, tc.weight_decay)
            b = len(idx)
            totals += b * np.array([terms.total.item(), terms.metric,
                                    terms.transformer if terms.transformer is not None else 0.0])
            seen += b
        mean = totals / max(seen, 1)
        record = EpochRecord(epoch=epoch, step=state.step, lr=lr, loss_total=float(mean[0]),
                             loss_metric=float(mean[1]),
                             loss_transformer=float(mean[2]) if with_transformer else None,
                             alpha=tc.alpha, wallclock_s=0.0 if tc.deterministic else round(time.perf_counter() - start, 3))
        if pairs is not None and holdout is not None and tc.eval_every and epoch % tc.eval_every == 0:
            record.val_accuracy = verification_accuracy(pairs, embed_dataset(model, holdout)).accuracy
        history.append(record)
        log.info("epoch %d lr %.4g loss %.4f (metric %.4f) val %s", epoch, lr, record.loss_total,
                 record.loss_metric, record.val_accuracy)
        if progress is not None:
            progress(record)
        if out_dir is not None:
            write_log(history, out_dir / "train_log.csv")
            write_validation_log(history, out_dir / "val_log.csv")
        if tc.checkpoint_every and epoch % tc.checkpoint_every == 0 and epoch != tc.epochs:
            save(epoch, f"epoch_{epoch:03d}.ckpt")

    model.eval()
    if out_dir is not None:
        write_log(history, out_dir / "train_log.csv")
        write_validation_log(history, out_dir / "val_log.csv")
        if tc.epochs > 0:
            save(tc.epochs, "final.ckpt")
    return TrainResult(model, history, checkpoints)


# --------------------------------------------------------------------------
# gradient-flow structure
# --------------------------------------------------------------------------

@dataclass
class IsolationReport:
    transformer_branch_norms: dict[str, float]
    metric_branch_norms: dict[str, float]

    @property
    def passed(self) -> bool:
        t, m = self.transformer_branch_norms, self.metric_branch_norms
        return (t["embedding_linear"] == 0.0 and t["metric_head"] == 0.0 and t["final_conv"] > 0.0
                and m["transformer"] == 0.0)


def _group_norms(model: TransformerMetricModel) -> tuple[dict[str, float], dict[str, str]]:
    params = dict(model.named_parameters())
    norms, leaks = {}, {}
    for group, names in model.parameter_groups().items():
        total = 0.0
        for n in names:
            g = params[n].grad
            if g is not None:
                v = float(np.sqrt(np.sum(g.astype(np.float64) ** 2)))
                if v > 0 and group not in leaks:
                    leaks[group] = n
                total += v * v
        norms[group] = math.sqrt(total)
    return norms, leaks


def check_branch_isolation(model: TransformerMetricModel, x: np.ndarray, labels, alpha: float = 0.4) -> IsolationReport:
    """Backward each branch loss alone and verify which parameters it reaches.

    The transformer-branch loss must leave the embedding linear map and the
    metric class weights with exactly zero gradient while reaching the final
    convolution; the metric-branch loss must not reach the transformer.
    Raises :class:`StructuralError` naming the first offending parameter.
    """
    if model.config.train.combine_mode == "metric_only":
        raise ValueError("branch isolation needs a model with an active transformer branch")
    dtype = model.backbone.stem_conv.weight.dtype
    x = np.asarray(x, dtype=dtype)

    model.zero_grad()
    out = model(Tensor(x), labels)
    F.scale(F.cross_entropy(out.transformer_logits, labels), alpha).backward()
    t_norms, t_leaks = _group_norms(model)

    model.zero_grad()
    out = model(Tensor(x), labels)
    F.scale(F.cross_entropy(out.metric_logits, labels), 1.0 - alpha).backward()
    m_norms, m_leaks = _group_norms(model)
    model.zero_grad()

    for group in ("embedding_linear", "metric_head"):
        if t_norms[group] != 0.0:
            raise StructuralError(f"transformer-branch loss reached {t_leaks[group]}")
    if m_norms["transformer"] != 0.0:
        raise StructuralError(f"metric-branch loss reached {m_leaks['transformer']}")
    if not t_norms["final_conv"] > 0.0:
        raise StructuralError("transformer-branch loss did not reach the final convolution")
    return IsolationReport(t_norms, m_norms)
