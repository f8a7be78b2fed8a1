"""Micro accuracy and macro one-vs-rest AUC (Mann-Whitney, ties count 1/2)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument, UndefinedMetric

log = logging.getLogger(__name__)


def micro_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise InvalidArgument(f"{p.shape[0] if p.ndim else 0} predictions for {y.shape[0] if y.ndim else 0} labels")
    if p.size == 0:
        raise InvalidArgument("accuracy of an empty set")
    return float(np.mean(p == y))


def ovr_auc(scores, positive) -> float:
    """P(random positive outscores random negative) from rank sums.

    ``positive`` is a boolean mask (or 0/1 labels) marking the positive class.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive).astype(bool)
    if s.shape != pos.shape:
        raise InvalidArgument("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs, labels, n_classes: int | None = None) -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class one-vs-rest AUCs.

    Classes without both positives and negatives are skipped with a warning.
    Returns (macro AUC, per-class AUC of the classes that were scored).
    """
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise InvalidArgument("need a probability matrix with at least 2 columns")
    if P.shape[0] != y.shape[0]:
        raise InvalidArgument("probability rows and labels differ in length")
    per_class = {}
    for c in range(n_classes or P.shape[1]):
        try:
            per_class[c] = ovr_auc(P[:, c], y == c)
        except UndefinedMetric:
            log.warning("class %d has no positives or no negatives; skipped in macro AUC", c)
    if not per_class:
        raise UndefinedMetric("no class has both positives and negatives")
    return float(np.mean(list(per_class.values()))), per_class


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


@dataclass
class EvalReport:
    micro_acc: float
    macro_auc: float | None
    per_class_auc: dict[int, float] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    n_bags: int = 0

    def to_json(self) -> dict:
        return {"micro_acc": self.micro_acc, "macro_auc": self.macro_auc,
                "per_class_auc": {str(k): v for k, v in self.per_class_auc.items()},
                "confusion": self.confusion, "n_bags": self.n_bags}


def evaluate(probs, labels) -> EvalReport:
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = P.argmax(axis=1)
    try:
        auc, per = macro_auc(P, y)
    except UndefinedMetric:
        auc, per = None, {}
    return EvalReport(micro_accuracy(pred, y), auc, per, confusion_matrix(pred, y, P.shape[1]).tolist(), len(y))
