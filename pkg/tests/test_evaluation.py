import csv
import logging

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import special_ortho_group

from tmloss.data import LabeledDataset, PairList
from tmloss.errors import ProtocolError
from tmloss.evaluation import (EmbeddingSet, embed_dataset, pair_scores, render_variance_table, roc_curve,
                               tar_at_far, variance_report, verification_accuracy, verify_scores,
                               write_roc_csv, write_variance_csv, write_verification_csv)
from tmloss.model import TransformerMetricModel

from conftest import small_config


def labelled_scores(rng, n_pos, n_neg, sep=0.0):
    scores = np.concatenate([rng.normal(sep, 1, n_pos), rng.normal(0, 1, n_neg)])
    issame = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    order = rng.permutation(len(scores))
    return scores[order], issame[order]


# ---------------------------------------------------------------- verification

def test_perfect_separation():
    rng = np.random.default_rng(0)
    pos, neg = rng.uniform(0.6, 1.0, 50), rng.uniform(-1.0, 0.4, 50)
    rep = verify_scores(np.concatenate([pos, neg]), np.r_[np.ones(50, bool), np.zeros(50, bool)])
    assert rep.accuracy == 1.0
    assert all(v == 1.0 for v in rep.tar_at_far.values())
    assert 0.4 < rep.best_threshold < 0.6


def test_shuffled_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(-1, 1, 1000)
        issame = rng.permutation(np.r_[np.ones(500, bool), np.zeros(500, bool)])
        accs.append(verify_scores(scores, issame).accuracy)
    assert all(abs(a - 0.5) <= 0.05 for a in accs)


def test_four_pair_two_fold_example():
    scores = np.array([0.9, 0.2, 0.8, 0.1])
    issame = np.array([True, False, True, False])
    rep = verify_scores(scores, issame, folds=2)
    assert rep.accuracy == 1.0
    assert all(0.2 < t < 0.8 for t in rep.fold_thresholds)
    for t in np.linspace(0.21, 0.79, 30):
        assert ((scores > t) == issame).all()


def _brute_best_accuracy(scores, issame):
    grid = np.concatenate([[scores.min() - 1], np.sort(scores), [scores.max() + 1]])
    mids = np.concatenate([grid, (grid[1:] + grid[:-1]) / 2])
    return max(((scores > t) == issame).mean() for t in mids)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16), sep=st.floats(0, 3))
def test_fold_thresholds_maximise_training_accuracy(seed, sep):
    rng = np.random.default_rng(seed)
    scores, issame = labelled_scores(rng, 40, 40, sep)
    rep = verify_scores(scores, issame, folds=4)
    fold_of = np.empty(80, int)
    fold_of[issame] = np.arange(40) % 4
    fold_of[~issame] = np.arange(40) % 4
    for k, t in enumerate(rep.fold_thresholds):
        tr = fold_of != k
        assert ((scores[tr] > t) == issame[tr]).mean() == pytest.approx(_brute_best_accuracy(scores[tr], issame[tr]))
        te = fold_of == k
        assert rep.fold_accuracies[k] == ((scores[te] > t) == issame[te]).mean()
    assert rep.accuracy == pytest.approx(np.mean(rep.fold_accuracies))


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16), kind=st.sampled_from(["exp", "cube", "affine", "tanh"]))
def test_invariant_under_increasing_transform(seed, kind):
    rng = np.random.default_rng(seed)
    scores, issame = labelled_scores(rng, 30, 30, 1.0)
    f = {"exp": np.exp, "cube": lambda s: s ** 3, "affine": lambda s: 3 * s + 7, "tanh": lambda s: np.tanh(s / 4)}[kind]
    t = f(scores)
    assume(len(np.unique(t)) == len(np.unique(scores)))
    a, b = verify_scores(scores, issame), verify_scores(t, issame)
    assert a.accuracy == b.accuracy and a.fold_accuracies == b.fold_accuracies
    assert a.roc == b.roc


def _brute_roc(scores, issame):
    pts = {(0.0, 0.0)}
    for t in np.unique(scores):
        pred = scores >= t
        pts.add(((pred & ~issame).sum() / (~issame).sum(), (pred & issame).sum() / issame.sum()))
    return sorted(pts)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16), ties=st.booleans())
def test_roc_matches_brute_force_and_is_monotone(seed, ties):
    rng = np.random.default_rng(seed)
    scores, issame = labelled_scores(rng, 25, 35, 0.8)
    if ties:
        scores = np.round(scores, 1)
    roc = roc_curve(scores, issame)
    assert sorted(roc) == roc
    np.testing.assert_allclose(np.array(roc), np.array(_brute_roc(scores, issame)))
    fars, tars = zip(*roc)
    assert all(np.diff(fars) >= 0) and all(np.diff(tars) >= 0)
    assert roc[-1] == (1.0, 1.0)


def test_tied_scores_form_single_step():
    roc = roc_curve(np.array([0.5, 0.5, 0.5, 0.5]), np.array([True, False, True, False]))
    assert roc == [(0.0, 0.0), (1.0, 1.0)]


def test_tar_at_far_interpolates():
    roc = [(0.0, 0.0), (0.0, 0.4), (0.5, 0.8), (1.0, 1.0)]
    out = tar_at_far(roc, [0.0, 0.25, 0.75])
    assert out[0.0] == 0.4 and out[0.25] == pytest.approx(0.6) and out[0.75] == pytest.approx(0.9)


@pytest.mark.parametrize("issame", [[True] * 20, [False] * 20])
def test_single_class_pair_list_rejected(issame):
    with pytest.raises(ProtocolError):
        verify_scores(np.linspace(0, 1, 20), np.array(issame))


def test_too_few_pairs_for_folds():
    with pytest.raises(ProtocolError):
        verify_scores(np.linspace(0, 1, 8), np.array([True, False] * 4), folds=10)


def test_verification_accuracy_on_embeddings():
    v = np.array([[1.0, 0.0, 0.0], [0.99, 0.141, 0.0], [0.0, 0.141, 0.99], [0.0, 0.0, 1.0]])
    emb = EmbeddingSet(v / np.linalg.norm(v, axis=1, keepdims=True), np.array([0, 0, 1, 1]),
                       ["a/0", "a/1", "b/0", "b/1"], normalized=True)
    pairs = PairList([("a/0", "a/1", True), ("b/0", "b/1", True), ("a/0", "b/0", False), ("a/1", "b/1", False)])
    scores = pair_scores(pairs, emb)
    assert scores[0] > 0.98 and abs(scores[2]) < 1e-12
    assert verification_accuracy(pairs, emb, folds=2).accuracy == 1.0
    with pytest.raises(ProtocolError):
        pair_scores(PairList([("a/0", "zz", True), ("a/0", "b/0", False)]), emb)


def test_embedding_set_invariants():
    with pytest.raises(ValueError):
        EmbeddingSet(np.ones((2, 3)), np.array([0]), ["a", "b"])
    with pytest.raises(ValueError):
        EmbeddingSet(np.ones((1, 3)), np.array([0]), ["a"], normalized=True)


def test_embed_dataset_unit_rows_and_duplicates():
    ds = LabeledDataset(np.random.default_rng(0).integers(0, 256, (3, 16, 16, 3), dtype=np.uint8),
                        np.array([0, 1, 0]), 2, ["a/0", "b/0", "a/1"], ["a", "b"])
    ds = ds.subset([0, 1, 2, 0])
    model = TransformerMetricModel(small_config(), 2, seed=0)
    emb = embed_dataset(model, ds)
    assert emb.matrix.shape == (4, 12) and emb.normalized
    np.testing.assert_allclose(np.linalg.norm(emb.matrix, axis=1), 1.0, atol=1e-6)
    assert emb.matrix[0].tobytes() == emb.matrix[3].tobytes()
    assert embed_dataset(model, ds).matrix.tobytes() == emb.matrix.tobytes()


# ---------------------------------------------------------------- variance

def _brute_variance(x, labels):
    classes = [x[labels == k] for k in np.unique(labels)]
    intra = np.mean([np.trace(np.atleast_2d(np.cov(c.T, bias=True))) for c in classes])
    cents = np.array([c.mean(0) for c in classes])
    inter = np.trace(np.atleast_2d(np.cov(cents.T, bias=True)))
    return intra, inter


def test_identical_embeddings_undefined():
    rep = variance_report(EmbeddingSet(np.ones((6, 3)), np.array([0, 0, 1, 1, 2, 2]), list("abcdef")))
    assert rep.intra == 0 and rep.inter == 0 and rep.status == "undefined" and np.isnan(rep.ratio)


def test_two_point_classes_infinite_ratio():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    rep = variance_report(EmbeddingSet(x, np.array([0, 0, 1, 1]), list("abcd")))
    assert rep.intra == 0.0 and rep.inter == 1.0 and rep.status == "infinite" and rep.ratio == np.inf


def test_singleton_class_excluded_with_warning(caplog):
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0], [5.0, 5.0]])
    with caplog.at_level(logging.WARNING):
        rep = variance_report(EmbeddingSet(x, np.array([0, 0, 1, 1, 2]), list("abcde")))
    assert rep.excluded_classes == [2] and "excluded" in caplog.text
    intra, inter = _brute_variance(x[:4], np.array([0, 0, 1, 1]))
    assert rep.intra == pytest.approx(intra) and rep.inter == pytest.approx(inter)


def test_all_singletons_rejected():
    with pytest.raises(ProtocolError):
        variance_report(EmbeddingSet(np.eye(3), np.array([0, 1, 2]), list("abc")))


@settings(max_examples=25)
@given(seed=st.integers(0, 2**16), dim=st.integers(2, 6), c=st.floats(0.1, 10))
def test_variance_properties(seed, dim, c):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 5)
    x = rng.normal(size=(20, dim)) + 2 * rng.normal(size=(4, dim))[labels]
    base = variance_report(EmbeddingSet(x, labels, [str(i) for i in range(20)]))
    intra, inter = _brute_variance(x, labels)
    assert base.intra == pytest.approx(intra, rel=1e-12) and base.inter == pytest.approx(inter, rel=1e-12)
    assert base.ratio == pytest.approx(inter / intra, rel=1e-12)

    q = special_ortho_group.rvs(dim, random_state=seed) if dim > 1 else np.eye(1)
    rot = variance_report(EmbeddingSet(x @ q.T, labels, [str(i) for i in range(20)]))
    assert abs(rot.intra - base.intra) < 1e-6 and abs(rot.inter - base.inter) < 1e-6
    assert abs(rot.ratio - base.ratio) < 1e-6

    scaled = variance_report(EmbeddingSet(c * x, labels, [str(i) for i in range(20)]))
    assert scaled.intra == pytest.approx(c * c * base.intra, rel=1e-9)
    assert scaled.inter == pytest.approx(c * c * base.inter, rel=1e-9)
    assert abs(scaled.ratio - base.ratio) < 1e-6


# ---------------------------------------------------------------- report files

def test_variance_table_golden():
    table = render_variance_table([("Standard ArcFace Loss", 5.39, 5.07, 0.94)])
    assert table == (
        "+-----------------------+-------------+-------------+-------------------+\n"
        "| Loss                  | Intra class | Inter class | Inter/Intra Ratio |\n"
        "+-----------------------+-------------+-------------+-------------------+\n"
        "| Standard ArcFace Loss |        5.39 |        5.07 |              0.94 |\n"
        "+-----------------------+-------------+-------------+-------------------+\n")


def test_csv_writers(tmp_path):
    rng = np.random.default_rng(1)
    scores, issame = labelled_scores(rng, 30, 30, 2.0)
    rep = verify_scores(scores, issame)
    write_verification_csv(rep, tmp_path / "v.csv")
    write_roc_csv(rep, tmp_path / "r.csv")
    rows = dict(csv.reader(open(tmp_path / "v.csv")))
    assert float(rows["accuracy"]) == rep.accuracy and "tar_at_far_0.0001" in rows
    roc_rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert roc_rows[0] == ["far", "tar"] and len(roc_rows) == len(rep.roc) + 1
    var = variance_report(EmbeddingSet(rng.normal(size=(6, 2)), np.array([0, 0, 0, 1, 1, 1]), list("abcdef")))
    write_variance_csv([("arcface", var)], tmp_path / "var.csv")
    assert open(tmp_path / "var.csv").readline().strip() == "loss,intra,inter,ratio,status"
