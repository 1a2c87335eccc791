"""Classification metrics defined bit-exactly so ports can be compared.

AUROC is the Mann-Whitney rank statistic with average ranks for ties:

    auc = (rank_sum_pos - n_pos (n_pos + 1) / 2) / (n_pos * n_neg)

AP integrates the precision-recall curve stepwise over distinct score
thresholds in descending order:

    ap = sum over thresholds of (recall_t - recall_{t-1}) * precision_t

Macro one-vs-rest averages skip classes missing either positives or
negatives.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation


def top1_accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ContractViolation("label arrays differ in shape")
    return float((y_true == y_pred).mean())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.arange(1, x.size + 1, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = ranks[order[i:j + 1]].mean()
        i = j + 1
    return ranks


def binary_auroc(labels: np.ndarray, scores: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("AUROC needs both positives and negatives")
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_ap(labels: np.ndarray, scores: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ContractViolation("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    # group ties: evaluate at the last index of each distinct score
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    ends = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def auroc_ovr_macro(y_true, probs) -> float:
    """Macro one-vs-rest AUROC over the probability matrix columns."""
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    values = []
    for c in range(probs.shape[1]):
        labels = y_true == c
        if labels.any() and not labels.all():
            values.append(binary_auroc(labels, probs[:, c]))
    if not values:
        raise ContractViolation("no class had both positives and negatives")
    return float(np.mean(values))


def ap_ovr_macro(y_true, probs) -> float:
    """Macro one-vs-rest average precision over the probability columns."""
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    values = []
    for c in range(probs.shape[1]):
        labels = y_true == c
        if labels.any() and not labels.all():
            values.append(binary_ap(labels, probs[:, c]))
    if not values:
        raise ContractViolation("no class had both positives and negatives")
    return float(np.mean(values))


def classification_metrics(y_true, probs) -> dict:
    """Top-1 accuracy plus macro one-vs-rest AUROC and AP, as one record."""
    probs = np.asarray(probs, dtype=np.float64)
    return {
        "accuracy": top1_accuracy(y_true, probs.argmax(axis=1)),
        "auroc": auroc_ovr_macro(y_true, probs),
        "ap": ap_ovr_macro(y_true, probs),
    }
