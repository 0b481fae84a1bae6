"""Classification metrics: confusion matrix, balanced accuracy, weighted F1,
and macro one-vs-rest AUROC / AUPRC (ties count one half; average precision
uses the uninterpolated step sum)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .validation import as_label_array, check_prob_rows


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their group average."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    n = len(x)
    ranks = np.empty(n)
    boundaries = np.flatnonzero(np.concatenate(([True], sx[1:] != sx[:-1], [True])))
    for start, stop in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
    return ranks


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = predicted."""
    t = as_label_array(truth, "truth", n_classes)
    p = as_label_array(pred, "predictions", n_classes)
    if t.shape != p.shape:
        raise ValueError(f"truth and predictions differ in length: {t.shape} vs {p.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Mean per-class recall."""
    cm = np.asarray(confusion, dtype=np.float64)
    row_sums = cm.sum(axis=1)
    empty = np.flatnonzero(row_sums == 0)
    if empty.size:
        raise ValueError(f"no ground-truth samples for class {int(empty[0])}")
    return float((np.diag(cm) / row_sums).mean())


def weighted_f1(confusion: np.ndarray) -> float:
    """Support-weighted mean of per-class F1 (0 where precision+recall is 0)."""
    cm = np.asarray(confusion, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return float((f1 * row / total).sum())


def _present_classes(truth: np.ndarray, n_classes: int, what: str) -> list[int]:
    counts = np.bincount(truth, minlength=n_classes)
    if (counts > 0).sum() < 2:
        raise ValueError(f"{what} needs at least two classes present in truth")
    present = []
    for c in range(n_classes):
        if counts[c] == 0:
            warnings.warn(f"class {c} absent from truth; excluded from {what}")
        else:
            present.append(c)
    return present


def binary_auroc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Probability a positive outranks a negative, ties counting one half.

    Computed from midranks; exactly equal to the pairwise comparison count.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs both positives and negatives")
    ranks = midranks(np.concatenate([pos, neg]))
    ranksum = ranks[: pos.size].sum()
    u = ranksum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def binary_average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    """Step-sum average precision; ties in score break by ascending index."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("average precision needs both positives and negatives")
    order = np.argsort(-s, kind="mergesort")
    hits = y[order]
    tp = np.cumsum(hits)
    prec_at_pos = tp[hits] / (np.flatnonzero(hits) + 1)
    return float(prec_at_pos.sum() / n_pos)


def auroc_macro(truth, prob) -> float:
    """Macro average of one-vs-rest AUROC over classes present in truth."""
    p = check_prob_rows(prob)
    t = as_label_array(truth, "truth", p.shape[1])
    present = _present_classes(t, p.shape[1], "AUROC")
    scores = [binary_auroc(p[t == c, c], p[t != c, c]) for c in present]
    return float(np.mean(scores))


def auprc_macro(truth, prob) -> float:
    """Macro average of one-vs-rest average precision over present classes."""
    p = check_prob_rows(prob)
    t = as_label_array(truth, "truth", p.shape[1])
    present = _present_classes(t, p.shape[1], "AUPRC")
    scores = [binary_average_precision(t == c, p[:, c]) for c in present]
    return float(np.mean(scores))


@dataclass
class MetricsBundle:
    confusion: np.ndarray
    bal_acc: float
    w_f1: float
    auprc: float
    auroc: float

    @property
    def mean(self) -> float:
        return mean_metric(self.bal_acc, self.w_f1, self.auprc, self.auroc)

    def to_dict(self) -> dict:
        return {
            "bal_acc": self.bal_acc,
            "w_f1": self.w_f1,
            "auprc": self.auprc,
            "auroc": self.auroc,
            "mean": self.mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def mean_metric(bal_acc: float, w_f1: float, auprc: float, auroc: float) -> float:
    """The summary column: arithmetic mean of the four metrics."""
    return (bal_acc + w_f1 + auprc + auroc) / 4.0


def compute_metrics(truth, pred, prob) -> MetricsBundle:
    t = as_label_array(truth, "truth")
    p = check_prob_rows(prob)
    cm = confusion_matrix(t, pred, p.shape[1])
    return MetricsBundle(
        confusion=cm,
        bal_acc=balanced_accuracy(cm),
        w_f1=weighted_f1(cm),
        auprc=auprc_macro(t, p),
        auroc=auroc_macro(t, p),
    )
