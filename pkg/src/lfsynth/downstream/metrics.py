"""Ranking metrics and uncertainty sampling."""
from __future__ import annotations

import numpy as np
from sklearn.metrics import average_precision_score


class NoPositives(ValueError):
    def __init__(self, cls):
        super().__init__(f"class {cls} has no positive examples")
        self.cls = cls


class KTooLarge(ValueError):
    pass


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: sum over recall steps of precision at that rank."""
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0:
        raise NoPositives(1)
    return float(average_precision_score(labels, np.asarray(scores, dtype=float)))


def mean_average_precision(scores, labels, task: str = "multiclass", classes=None) -> float:
    """Unweighted mean of per-class AP.

    ``multiclass``/``one_vs_rest``: ``labels`` are class indices and ``scores`` an
    (n, k) matrix; ``multilabel_binary``: ``labels`` is an (n, k) 0/1 matrix;
    ``binary``: AP of the positive class (column 1 of a two-column score matrix).
    ``classes`` restricts which columns are averaged.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if task == "binary":
        s = scores[:, 1] if scores.ndim == 2 else scores
        return average_precision(s, labels.astype(int) == 1)
    if task in ("multiclass", "one_vs_rest"):
        k = scores.shape[1]
        onehot = np.zeros((len(labels), k), dtype=int)
        onehot[np.arange(len(labels)), labels.astype(int)] = 1
    elif task == "multilabel_binary":
        onehot = labels.astype(int)
    else:
        raise ValueError(f"unknown task {task!r}")
    cols = range(scores.shape[1]) if classes is None else classes
    aps = []
    for c in cols:
        if onehot[:, c].sum() == 0:
            raise NoPositives(c)
        aps.append(average_precision_score(onehot[:, c], scores[:, c]))
    return float(np.mean(aps))


def task_map(probs, labels, num_classes: int, classes=None) -> float:
    """mAP as reported by the loops: positive class for binary tasks, one-vs-rest otherwise."""
    if num_classes == 2:
        return mean_average_precision(probs, labels, "binary")
    return mean_average_precision(probs, labels, "one_vs_rest", classes)


def entropy(probs) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=float), 0, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0)
    return h.sum(1)


def max_entropy_select(probs_or_classifier, k: int, pool=None, weak=None) -> np.ndarray:
    """Indices of the ``k`` rows with the highest predictive entropy (ties: lowest index first).

    Pass either a probability matrix, or a classifier plus the ``pool`` inputs.
    """
    if pool is not None:
        probs = probs_or_classifier.predict_proba(pool, weak)
    else:
        probs = np.asarray(probs_or_classifier)
    n = len(probs)
    if k > n:
        raise KTooLarge(f"k={k} exceeds pool size {n}")
    if k < 0:
        raise ValueError("k must be non-negative")
    order = np.argsort(-entropy(probs), kind="stable")
    return order[:k]
