"""Classification metrics: accuracy, macro one-vs-rest AUC, macro F1."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import CLASSES


class MetricError(ValueError):
    pass


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels))


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc_ovr(scores, labels, num_classes: int = 3) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    aucs = []
    for k in range(num_classes):
        pos = labels == k
        if not pos.any():
            name = CLASSES[k] if num_classes == len(CLASSES) else str(k)
            raise MetricError(f"class {name} is absent from the labels")
        aucs.append(binary_auc(scores[:, k], pos))
    return float(np.mean(aucs))


def confusion(preds, labels, num_classes: int = 3) -> np.ndarray:
    """``[true, predicted]`` counts."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(preds)), 1)
    return m


def macro_f1(preds, labels, num_classes: int = 3) -> float:
    m = confusion(preds, labels, num_classes)
    tp = np.diag(m).astype(float)
    pred_tot = m.sum(axis=0)
    true_tot = m.sum(axis=1)
    denom = pred_tot + true_tot
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    f1: float
    confusion: np.ndarray

    @classmethod
    def from_scores(cls, scores, labels) -> "EvalReport":
        scores = np.asarray(scores)
        preds = scores.argmax(axis=1)
        return cls(accuracy(preds, labels), macro_auc_ovr(scores, labels, scores.shape[1]),
                   macro_f1(preds, labels, scores.shape[1]), confusion(preds, labels, scores.shape[1]))

    def to_tsv(self) -> str:
        lines = [f"metric\tvalue", f"accuracy\t{self.accuracy:.6f}", f"auc_macro_ovr\t{self.auc:.6f}",
                 f"f1_macro\t{self.f1:.6f}", "true\\pred\t" + "\t".join(CLASSES)]
        for name, row in zip(CLASSES, self.confusion):
            lines.append(name + "\t" + "\t".join(str(int(c)) for c in row))
        return "\n".join(lines)

    def result_line(self) -> str:
        return f"RESULT acc={self.accuracy:.6f} auc={self.auc:.6f} f1={self.f1:.6f}"
