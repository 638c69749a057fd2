import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmloss.autodiff import Tensor, functional as F, grad_check, precision
from tmloss.data import normalize, split_holdout
from tmloss.errors import DimensionError, IntegrityError, NumericalError, StructuralError
from tmloss.model import BranchOutputs, TransformerMetricModel
from tmloss.trainer import (LOG_COLUMNS, OptimizerState, branch_loss, check_branch_isolation, combined_loss,
                            lr_at_epoch, sgd_step, summed_logits_loss, train, trainable_parameters)

from conftest import small_config


def logits(rng, b=3, n=4, dtype=np.float64):
    return Tensor(rng.normal(size=(b, n)).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------- losses

def test_combined_loss_hand_value():
    # CE of uniform logits over N classes is ln N; pick N so that CE_O = 2, CE_T = 1
    o = Tensor(np.log(np.array([[1.0, np.e ** 2 - 1]])))
    t = Tensor(np.log(np.array([[1.0, np.e - 1]])))
    assert F.cross_entropy(o, [0]).item() == pytest.approx(2.0)
    assert F.cross_entropy(t, [0]).item() == pytest.approx(1.0)
    assert combined_loss(o, t, [0], 0.4).item() == pytest.approx(1.6)


def test_identical_branches_make_alpha_irrelevant(rng):
    o = logits(rng)
    vals = [combined_loss(o, o, [0, 1, 2], a).item() for a in (0.1, 0.4, 0.9)]
    assert max(vals) - min(vals) < 1e-12


@given(seed=st.integers(0, 2**16), alpha=st.floats(0.01, 0.99))
def test_combined_loss_linear_in_alpha(seed, alpha):
    rng = np.random.default_rng(seed)
    o, t = logits(rng), logits(rng)
    y = rng.integers(0, 4, 3)
    c_o, c_t = F.cross_entropy(o, y).item(), F.cross_entropy(t, y).item()
    assert combined_loss(o, t, y, alpha).item() == pytest.approx(c_o + alpha * (c_t - c_o), abs=1e-12)


def test_combined_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        combined_loss(logits(rng, n=4), logits(rng, n=5), [0, 1, 2], 0.4)
    with pytest.raises(DimensionError):
        summed_logits_loss(logits(rng, b=2), logits(rng, b=3), [0, 1])


def test_summed_logits_reductions(rng):
    o = logits(rng)
    y = [0, 3, 1]
    zero = Tensor(np.zeros((3, 4)))
    assert summed_logits_loss(o, zero, y).item() == F.cross_entropy(o, y).item()
    assert summed_logits_loss(o, o, y).item() == pytest.approx(F.cross_entropy(F.scale(o, 2.0), y).item(),
                                                               abs=1e-15)


def test_summed_logits_gradcheck():
    rng = np.random.default_rng(2)
    o, t = Tensor(rng.uniform(-2, 2, (2, 3)), requires_grad=True), Tensor(rng.uniform(-2, 2, (2, 3)),
                                                                        requires_grad=True)
    assert grad_check(lambda o, t: summed_logits_loss(o, t, [1, 2]), [o, t]) < 1e-5


def test_branch_loss_metric_only_has_no_transformer_term(rng):
    out = BranchOutputs(None, None, logits(rng), None)
    terms = branch_loss(out, [0, 1, 2], "metric_only", 0.4)
    assert terms.transformer is None and terms.total.item() == terms.metric


# ---------------------------------------------------------------- optimiser

def test_lr_schedule():
    assert lr_at_epoch(1) == 0.1 and lr_at_epoch(9) == 0.1
    assert lr_at_epoch(10) == pytest.approx(0.01)
    assert lr_at_epoch(11) == pytest.approx(0.01)
    assert lr_at_epoch(18) == pytest.approx(0.001)
    assert lr_at_epoch(22) == pytest.approx(0.0001)


@given(st.integers(1, 40))
def test_lr_schedule_formula(epoch):
    drops = sum(1 for d in (10, 18, 22) if d <= epoch)
    assert lr_at_epoch(epoch) == 0.1 / 10 ** drops


def test_sgd_zero_grad_no_change():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    sgd_step({"p": p}, OptimizerState(), lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_single_step_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.25])
    sgd_step({"p": p}, OptimizerState(), lr=0.1, momentum=0.9, weight_decay=5e-4)
    np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.1 * (np.array([0.5, 0.25]) + 5e-4 * np.array([1.0, -2.0])))


def test_sgd_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimizerState()
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step({"p": p}, state, lr=1.0, momentum=0.5, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-(1.0 + 1.5))
    assert state.step == 2


def test_sgd_plain_gradient_descent():
    p = Tensor(np.array([3.0]), requires_grad=True)
    p.grad = np.array([2.0])
    sgd_step({"p": p}, OptimizerState(), lr=0.25, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == 2.5


def test_sgd_missing_grad():
    with pytest.raises(IntegrityError, match="w"):
        sgd_step({"w": Tensor(np.ones(2), requires_grad=True)}, OptimizerState(), 0.1, 0.9, 0.0)


def test_metric_only_excludes_transformer():
    model = TransformerMetricModel(small_config(), 4, 0)
    assert not any(n.startswith("transformer_head") for n in trainable_parameters(model, "metric_only"))
    assert any(n.startswith("transformer_head") for n in trainable_parameters(model, "weighted"))


# ---------------------------------------------------------------- isolation

def test_branch_isolation_passes(rng):
    model = TransformerMetricModel(small_config(), 4, 0)
    report = check_branch_isolation(model, rng.normal(size=(4, 3, 16, 16)), np.array([0, 1, 2, 3]))
    assert report.passed
    assert report.transformer_branch_norms["embedding_linear"] == 0.0
    assert report.transformer_branch_norms["metric_head"] == 0.0
    assert report.transformer_branch_norms["final_conv"] > 0.0
    assert report.metric_branch_norms["transformer"] == 0.0


def test_branch_isolation_detects_leak(rng):
    class Leaky(TransformerMetricModel):
        def forward(self, x, labels, with_transformer=True):
            out = super().forward(x, labels, with_transformer)
            leak = F.scale(F.sum(out.embedding, axis=1, keepdims=True), 1e-3)
            return BranchOutputs(out.feature_map, out.embedding, out.metric_logits,
                                 F.add(out.transformer_logits, leak))

    model = Leaky(small_config(), 4, 0)
    with pytest.raises(StructuralError, match="backbone.embedding"):
        check_branch_isolation(model, rng.normal(size=(4, 3, 16, 16)), np.array([0, 1, 2, 3]))


def test_metric_only_equals_weighted_at_alpha_zero(rng):
    x = rng.normal(size=(4, 3, 16, 16))
    y = np.array([0, 1, 2, 3])
    results = []
    for mode in ("metric_only", "weighted"):
        with precision(np.float64):
            model = TransformerMetricModel(small_config(), 4, 0)
        out = model(Tensor(x), y, with_transformer=mode != "metric_only")
        terms = branch_loss(out, y, mode, 0.0)
        terms.total.backward()
        grads = {n: p.grad.copy() for n, p in model.named_parameters() if n.startswith("backbone.")}
        results.append((terms.total.item(), grads))
    (l1, g1), (l2, g2) = results
    assert abs(l1 - l2) < 1e-7
    assert max(np.abs(g1[k] - g2[k]).max() for k in g1) < 1e-7


# ---------------------------------------------------------------- training loop

def _read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_zero_epochs_writes_initial_checkpoint_only(tmp_path, tiny_dataset):
    result = train(small_config(epochs=0), tiny_dataset, tmp_path)
    assert [p.name for p in result.checkpoints] == ["epoch_000.ckpt"]
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines == [",".join(LOG_COLUMNS)]


def test_train_log_columns_and_metric_only(tmp_path, tiny_dataset):
    train_set, holdout = split_holdout(tiny_dataset, 0.25)
    from tmloss.data import make_pairs

    pairs = make_pairs(holdout, 10, 10, 0)
    result = train(small_config(epochs=2, combine_mode="metric_only"), train_set, tmp_path,
                   holdout=holdout, pairs=pairs)
    rows = _read_log(tmp_path / "train_log.csv")
    assert list(rows[0]) == LOG_COLUMNS and len(rows) == 2
    assert all(r["loss_transformer"] == "" for r in rows)
    assert [int(r["epoch"]) for r in _read_log(tmp_path / "val_log.csv")] == [1, 2]
    assert result.history[-1].val_accuracy is not None


def test_train_weighted_logs_both_losses(tmp_path, tiny_dataset):
    train(small_config(epochs=1), tiny_dataset, tmp_path)
    row = _read_log(tmp_path / "train_log.csv")[0]
    assert float(row["loss_metric"]) > 0 and float(row["loss_transformer"]) > 0
    assert float(row["alpha"]) == 0.4 and float(row["lr"]) == 0.1


def test_train_non_finite_loss_aborts(tiny_dataset):
    cfg = small_config(epochs=1, lr0=1e30)
    with pytest.raises(NumericalError, match="non-finite loss"):
        with np.errstate(all="ignore"):
            train(cfg, tiny_dataset)


def test_deterministic_training_logs_identical(tmp_path, tiny_dataset):
    cfg = small_config(epochs=2, deterministic=True)
    train(cfg, tiny_dataset, tmp_path / "a")
    train(cfg, tiny_dataset, tmp_path / "b")
    for name in ("train_log.csv", "checkpoints/final.ckpt", "checkpoints/epoch_000.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert all(r["wallclock_s"] == "0.0" for r in _read_log(tmp_path / "a" / "train_log.csv"))


def test_training_reduces_loss(tiny_dataset):
    result = train(small_config(epochs=4, batch_size=8), tiny_dataset)
    assert result.history[-1].loss_total < result.history[0].loss_total


def test_training_batches_are_normalised(tiny_dataset):
    x = normalize(tiny_dataset.images)
    assert x.min() > -1 and x.max() <= 1
