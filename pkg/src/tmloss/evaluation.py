"""Verification protocol (k-fold accuracy, ROC, TAR@FAR) and class-variance analysis."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tmloss.data import LabeledDataset, PairList, normalize
from tmloss.errors import ProtocolError

log = logging.getLogger(__name__)

DEFAULT_FAR_LEVELS = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    labels: np.ndarray
    keys: list[str]
    normalized: bool = False

    def __post_init__(self):
        if len(self.matrix) != len(self.labels):
            raise ValueError("embedding rows and labels differ in count")
        if self.normalized and len(self.matrix):
            norms = np.linalg.norm(self.matrix, axis=1)
            if np.abs(norms - 1).max() > 1e-6:
                raise ValueError("normalized embedding set has rows that are not unit norm")


def l2_rows(matrix: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    return m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), eps)


def embed_dataset(model, dataset: LabeledDataset, batch_size: int = 256) -> EmbeddingSet:
    """One l2-normalised branch-1 embedding per image, eval mode, no augmentation."""
    from tmloss.model import embed_images

    raw = embed_images(model, normalize(dataset.images), batch_size)
    return EmbeddingSet(l2_rows(raw), dataset.labels.copy(), list(dataset.paths), normalized=True)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

@dataclass
class VerificationReport:
    accuracy: float
    accuracy_std: float
    best_threshold: float
    roc: list[tuple[float, float]]
    tar_at_far: dict[float, float]
    fold_accuracies: list[float] = field(default_factory=list)
    fold_thresholds: list[float] = field(default_factory=list)
    num_pairs: int = 0


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2
    span = max(1.0, float(np.abs(u).max()))
    return np.concatenate([[u[0] - span], mids, [u[-1] + span]])


def _accuracy_at(scores, issame, thresholds) -> np.ndarray:
    pred = scores[None, :] > thresholds[:, None]
    return (pred == issame[None, :]).mean(axis=1)


def _best_threshold(scores, issame, candidates) -> float:
    acc = _accuracy_at(scores, issame, candidates)
    tied = np.flatnonzero(acc == acc.max())
    centre = (len(candidates) - 1) / 2
    return float(candidates[tied[np.argmin(np.abs(tied - centre))]])


def roc_curve(scores: np.ndarray, issame: np.ndarray) -> list[tuple[float, float]]:
    """(FAR, TAR) sweeping the threshold downward; tied scores form one step."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], issame[order]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    points = [(0.0, 0.0)]
    points += [(fp[i] / n_neg, tp[i] / n_pos) for i in np.flatnonzero(last_of_group)]
    return [(float(a), float(b)) for a, b in points]


def tar_at_far(roc: list[tuple[float, float]], levels: Sequence[float]) -> dict[float, float]:
    """Linear interpolation on the upper envelope of the ROC."""
    far = np.array([p[0] for p in roc])
    tar = np.array([p[1] for p in roc])
    ux = np.unique(far)
    uy = np.array([tar[far == x].max() for x in ux])
    return {float(level): float(np.interp(level, ux, uy)) for level in levels}


def verify_scores(scores, issame, folds: int = 10, far_levels: Sequence[float] = DEFAULT_FAR_LEVELS) -> VerificationReport:
    """k-fold threshold selection on similarity scores.

    Positive and negative pairs are dealt into folds round-robin (in input
    order). For each fold the threshold maximising accuracy on the other
    folds is applied to it. Candidates are the cuts between adjacent distinct
    scores of the whole pair list, so the outcome depends only on score
    order. Among cuts with equal training accuracy the one closest to the
    median cut of the pooled list wins (lower one on an exact tie).
    """
    scores = np.asarray(scores, dtype=np.float64)
    issame = np.asarray(issame, dtype=bool)
    if scores.shape != issame.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    n_pos, n_neg = int(issame.sum()), int((~issame).sum())
    if n_pos == 0 or n_neg == 0:
        raise ProtocolError("verification needs both positive and negative pairs")
    if folds < 2 or n_pos < folds or n_neg < folds:
        raise ProtocolError(f"{folds}-fold verification needs at least {folds} positive and negative pairs "
                            f"(got {n_pos} / {n_neg})")
    fold_of = np.empty(len(scores), dtype=np.int64)
    fold_of[issame] = np.arange(n_pos) % folds
    fold_of[~issame] = np.arange(n_neg) % folds
    candidates = _candidate_thresholds(scores)
    accs, thresholds = [], []
    for k in range(folds):
        test = fold_of == k
        t = _best_threshold(scores[~test], issame[~test], candidates)
        thresholds.append(t)
        accs.append(float(((scores[test] > t) == issame[test]).mean()))
    roc = roc_curve(scores, issame)
    return VerificationReport(
        accuracy=float(np.mean(accs)),
        accuracy_std=float(np.std(accs)),
        best_threshold=_best_threshold(scores, issame, candidates),
        roc=roc,
        tar_at_far=tar_at_far(roc, far_levels),
        fold_accuracies=accs,
        fold_thresholds=thresholds,
        num_pairs=len(scores),
    )


def pair_scores(pairs: PairList, embeddings: EmbeddingSet) -> np.ndarray:
    index = {k: i for i, k in enumerate(embeddings.keys)}
    missing = [p for a, b, _ in pairs.entries for p in (a, b) if p not in index]
    if missing:
        raise ProtocolError(f"pair list references unknown images, e.g. {missing[:3]}")
    emb = embeddings.matrix if embeddings.normalized else l2_rows(embeddings.matrix)
    ia = np.array([index[a] for a, _, _ in pairs.entries])
    ib = np.array([index[b] for _, b, _ in pairs.entries])
    return np.einsum("ij,ij->i", emb[ia], emb[ib])


def verification_accuracy(pairs: PairList, embeddings: EmbeddingSet, folds: int = 10,
                          far_levels: Sequence[float] = DEFAULT_FAR_LEVELS) -> VerificationReport:
    """Cosine-similarity verification of ``pairs`` using ``embeddings``."""
    return verify_scores(pair_scores(pairs, embeddings), pairs.issame, folds, far_levels)


# --------------------------------------------------------------------------
# class variance
# --------------------------------------------------------------------------

@dataclass
class VarianceReport:
    intra: float
    inter: float
    ratio: float
    status: str = "ok"
    excluded_classes: list[int] = field(default_factory=list)


def variance_report(embeddings: EmbeddingSet) -> VarianceReport:
    """Trace-of-covariance spread within and between classes.

    intra: mean over classes of the mean squared distance to the class
    centroid. inter: mean squared distance of class centroids to their mean.
    ratio = inter / intra. Classes with a single sample are excluded.
    """
    x = np.asarray(embeddings.matrix, dtype=np.float64)
    labels = np.asarray(embeddings.labels)
    centroids, spreads, excluded = [], [], []
    for k in np.unique(labels):
        rows = x[labels == k]
        if len(rows) < 2:
            excluded.append(int(k))
            continue
        c = rows.mean(axis=0)
        centroids.append(c)
        spreads.append(((rows - c) ** 2).sum(axis=1).mean())
    if excluded:
        log.warning("variance_report: excluded %d single-sample classes", len(excluded))
    if len(centroids) < 2:
        raise ProtocolError("variance analysis needs at least two classes with two or more samples")
    centroids = np.array(centroids)
    intra = float(np.mean(spreads))
    inter = float(((centroids - centroids.mean(axis=0)) ** 2).sum(axis=1).mean())
    # sums of identical rows can leave ~1 ulp residue; treat that as zero spread
    tiny = 1e-24 + 1e-20 * float((x ** 2).sum(axis=1).mean())
    intra = 0.0 if intra <= tiny else intra
    inter = 0.0 if inter <= tiny else inter
    if intra == 0.0:
        status = "undefined" if inter == 0.0 else "infinite"
        ratio = float("nan") if inter == 0.0 else float("inf")
    else:
        status, ratio = "ok", inter / intra
    return VarianceReport(intra, inter, ratio, status, excluded)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

def render_variance_table(rows: Sequence[tuple[str, float, float, float]]) -> str:
    """Plain-text table with Loss / Intra class / Inter class / Inter/Intra Ratio columns."""
    header = ("Loss", "Intra class", "Inter class", "Inter/Intra Ratio")
    body = [(name, f"{intra:.2f}", f"{inter:.2f}", f"{ratio:.2f}") for name, intra, inter, ratio in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        first = f" {cells[0]:<{widths[0]}} "
        rest = [f" {c:>{w}} " for c, w in zip(cells[1:], widths[1:])]
        return "|" + "|".join([first, *rest]) + "|"

    return "\n".join([rule, line(header), rule, *(line(r) for r in body), rule]) + "\n"


def render_verification_table(report: VerificationReport) -> str:
    lines = [f"pairs                {report.num_pairs}",
             f"accuracy             {report.accuracy:.4f} +- {report.accuracy_std:.4f}",
             f"best threshold       {report.best_threshold:.4f}"]
    for level, tar in sorted(report.tar_at_far.items()):
        lines.append(f"TAR @ FAR={level:<8g} {tar:.4f}")
    return "\n".join(lines) + "\n"


def write_verification_csv(report: VerificationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["num_pairs", report.num_pairs])
        w.writerow(["accuracy", repr(report.accuracy)])
        w.writerow(["accuracy_std", repr(report.accuracy_std)])
        w.writerow(["best_threshold", repr(report.best_threshold)])
        for level, tar in sorted(report.tar_at_far.items()):
            w.writerow([f"tar_at_far_{level:g}", repr(tar)])


def write_roc_csv(report: VerificationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["far", "tar"])
        w.writerows((repr(a), repr(b)) for a, b in report.roc)


def write_variance_csv(rows: Sequence[tuple[str, VarianceReport]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["loss", "intra", "inter", "ratio", "status"])
        for name, r in rows:
            w.writerow([name, repr(r.intra), repr(r.inter), repr(r.ratio), r.status])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
