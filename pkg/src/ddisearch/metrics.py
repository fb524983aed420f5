"""Evaluation metrics for multi-class and multi-label interaction prediction.

Multi-class metrics (macro F1, accuracy, Cohen's kappa) take true relation
ids and per-query logits.  Multi-label metrics (ROC-AUC, PR-AUC, AP@k) take
scored (query, relation) pairs with 0/1 labels and average over relation
types; degenerate types (only one class present) are excluded with a warning
counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MulticlassEval:
    true_ids: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.true_ids = np.asarray(self.true_ids, dtype=np.int64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.true_ids.shape != (self.logits.shape[0],):
            raise ValueError("true_ids and logits lengths differ")
        if self.true_ids.size == 0:
            raise ValueError("empty evaluation")

    @property
    def num_classes(self):
        return self.logits.shape[1]

    @property
    def predictions(self):
        return np.argmax(self.logits, axis=1)


@dataclass
class MultilabelEval:
    relation_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.relation_ids = np.asarray(self.relation_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (self.relation_ids.shape == self.scores.shape == self.labels.shape):
            raise ValueError("relation_ids, scores, labels lengths differ")
        if self.labels.size == 0:
            raise ValueError("empty evaluation")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")


def accuracy(ev: MulticlassEval) -> float:
    """Fraction of queries whose argmax logit is the true relation."""
    return float(np.mean(ev.predictions == ev.true_ids))


def macro_f1(ev: MulticlassEval) -> float:
    """Unweighted mean of per-class F1; absent classes contribute 0."""
    preds = ev.predictions
    scores = []
    for c in range(ev.num_classes):
        tp = np.sum((preds == c) & (ev.true_ids == c))
        fp = np.sum((preds == c) & (ev.true_ids != c))
        fn = np.sum((preds != c) & (ev.true_ids == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def cohen_kappa(ev: MulticlassEval) -> float:
    """Chance-corrected agreement between argmax predictions and truth."""
    preds = ev.predictions
    n = len(preds)
    p_o = np.mean(preds == ev.true_ids)
    p_e = 0.0
    for c in range(ev.num_classes):
        p_e += np.sum(ev.true_ids == c) / n * np.sum(preds == c) / n
    if abs(1.0 - p_e) < 1e-15:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def _per_type(ev: MultilabelEval):
    for r in np.unique(ev.relation_ids):
        mask = ev.relation_ids == r
        yield int(r), ev.scores[mask], ev.labels[mask]


def _auc_single(scores, labels) -> float:
    # Mann-Whitney with midrank tie correction
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_precision_single(scores, labels) -> float:
    # step-wise integral of precision over recall, ties broken by input order
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    n_pos = int(y.sum())
    tp = np.cumsum(y)
    precision = tp / np.arange(1, len(y) + 1)
    return float((precision * y).sum() / n_pos)


def _mean_over_types(ev, fn, micro=False):
    values = {}
    skipped = 0
    for r, scores, labels in _per_type(ev):
        if labels.sum() == 0 or labels.sum() == len(labels):
            skipped += 1
            continue
        values[r] = fn(scores, labels)
    if not values:
        raise ValueError("no relation type has both a positive and a negative")
    if micro:
        mask = np.isin(ev.relation_ids, list(values))
        return fn(ev.scores[mask], ev.labels[mask]), values, skipped
    return float(np.mean(list(values.values()))), values, skipped


def roc_auc(ev: MultilabelEval, micro=False):
    """Mean per-type ROC AUC (rank formulation with tie correction)."""
    return _mean_over_types(ev, _auc_single, micro)[0]


def pr_auc(ev: MultilabelEval, micro=False):
    """Mean per-type average precision."""
    return _mean_over_types(ev, _average_precision_single, micro)[0]


def ap_at_k(ev: MultilabelEval, k=50):
    """Mean per-type precision among the top-k scored pairs (k capped)."""
    values = []
    for _, scores, labels in _per_type(ev):
        order = np.argsort(-scores, kind="stable")
        top = order[:min(k, len(order))]
        values.append(float(labels[top].mean()))
    if not values:
        raise ValueError("empty evaluation")
    return float(np.mean(values))


def multiclass_report(ev: MulticlassEval):
    return {"macro_f1": macro_f1(ev), "accuracy": accuracy(ev),
            "cohen_kappa": cohen_kappa(ev)}


def multilabel_report(ev: MultilabelEval, k=50):
    auc_mean, auc_types, skipped = _mean_over_types(ev, _auc_single)
    ap_mean, ap_types, _ = _mean_over_types(ev, _average_precision_single)
    return {
        "roc_auc": auc_mean,
        "pr_auc": ap_mean,
        "ap_at_k": ap_at_k(ev, k),
        "skipped_types": skipped,
        "per_type": {str(r): {"roc_auc": auc_types[r], "pr_auc": ap_types[r]}
                     for r in auc_types},
    }
