"""Baseline LF generators: per-category decision trees and randomly sized student networks."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from ..diffexec import balanced_class_weights
from ..dsl import DomainLFLibrary
from ..labelmodel import NoViableThreshold, apply_abstain
from .classifier import Classifier, DownstreamConfig, train_classifier


class TooFewGroups(ValueError):
    pass


def feature_groups(library: DomainLFLibrary) -> dict[str, list[int]]:
    """Feature columns of each domain-LF category."""
    out = {}
    for cat, entries in library.categories().items():
        cols = []
        for e in entries:
            cols += list(range(*e.columns))
        out[cat] = cols
    return out


def _frame_features(X):
    X = np.asarray(X, dtype=np.float64)
    # sequences are summarised by their per-feature mean over time
    return X.mean(1) if X.ndim == 3 else X


@dataclass
class DecisionTreeLF:
    group: str
    columns: list[int]
    tree: DecisionTreeClassifier
    num_classes: int

    def predict_proba(self, X) -> np.ndarray:
        Z = _frame_features(X)[:, self.columns]
        p = self.tree.predict_proba(Z)
        out = np.zeros((len(Z), self.num_classes))
        out[:, self.tree.classes_.astype(int)] = p
        return out

    @property
    def text(self) -> str:
        return f"DecisionTree[{self.group}, depth={self.tree.get_depth()}, nodes={self.tree.tree_.node_count}]"


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def subset_score(idx, f1s, masks) -> float:
    """Mean F1 plus mean pairwise (1 - Jaccard) of the non-abstain masks."""
    idx = list(idx)
    score = float(np.mean([f1s[i] for i in idx]))
    pairs = list(itertools.combinations(idx, 2))
    if pairs:
        score += float(np.mean([1 - jaccard(masks[i], masks[j]) for i, j in pairs]))
    return score


def prune_lfs(f1s, masks, n: int, max_subsets: int = 5000) -> list[int]:
    """Indices of the ``n`` candidates maximising :func:`subset_score`.

    Exhaustive when the number of subsets is small, else greedy forward selection.
    Ties go to the lexicographically smallest subset.
    """
    m = len(f1s)
    if n > m:
        raise TooFewGroups(f"need {n} candidates, have {m}")
    if math.comb(m, n) <= max_subsets:
        best, best_s = None, -np.inf
        for combo in itertools.combinations(range(m), n):
            s = subset_score(combo, f1s, masks)
            if s > best_s + 1e-12:
                best, best_s = combo, s
        return list(best)
    chosen: list[int] = []
    while len(chosen) < n:
        rest = [i for i in range(m) if i not in chosen]
        chosen.append(max(rest, key=lambda i: (subset_score(chosen + [i], f1s, masks), -i)))
    return sorted(chosen)


def fit_decision_tree_lfs(X, y, groups: dict[str, list[int]], n: int, num_classes: int, seed: int = 0,
                          min_coverage: float = 0.1) -> list[DecisionTreeLF]:
    """One Gini tree per feature group (depth <= ceil(log2 group size)), pruned to ``n``."""
    if len(groups) < n:
        raise TooFewGroups(f"{len(groups)} feature groups for {n} LFs")
    Z = _frame_features(X)
    y = np.asarray(y).astype(int)
    cands = []
    for name, cols in groups.items():
        depth = max(1, math.ceil(math.log2(len(cols)))) if len(cols) > 1 else 1
        tree = DecisionTreeClassifier(criterion="gini", max_depth=depth, random_state=seed)
        tree.fit(Z[:, cols], y)
        cands.append(DecisionTreeLF(name, list(cols), tree, num_classes))
    f1s, masks = [], []
    for lf in cands:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoViableThreshold)
            ab = apply_abstain(lf, X, y, num_classes, min_coverage)
        f1s.append(ab.f1)
        masks.append(ab.votes(X) != -1)
    keep = prune_lfs(f1s, masks, n)
    return [cands[i] for i in keep]


STUDENT_RANGES = {
    "l1": (50, 90), "l2": (50, 80), "l3": (20, 30),
    "d1": (0.0, 0.2), "d2": (0.0, 0.2), "d3": (0.0, 0.1),
    # recurrent students
    "layers": (1, 2), "hidden": (64, 128), "h1": (50, 80), "h2": (20, 30),
}


def sample_student_shape(rng: np.random.Generator, recurrent: bool = False) -> dict:
    r = STUDENT_RANGES
    if recurrent:
        return {
            "lstm_layers": int(rng.integers(r["layers"][0], r["layers"][1] + 1)),
            "lstm_hidden": int(rng.choice(r["hidden"])),
            "hidden": (int(rng.integers(r["h1"][0], r["h1"][1] + 1)), int(rng.integers(r["h2"][0], r["h2"][1] + 1))),
            "dropout": (float(rng.uniform(*r["d1"])), float(rng.uniform(*r["d2"]))),
        }
    return {
        "hidden": tuple(int(rng.integers(r[k][0], r[k][1] + 1)) for k in ("l1", "l2", "l3")),
        "dropout": tuple(float(rng.uniform(*r[k])) for k in ("d1", "d2", "d3")),
    }


@dataclass
class StudentNetworkLF:
    classifier: Classifier
    shape: dict

    def predict_proba(self, X) -> np.ndarray:
        return self.classifier.predict_proba(X)

    @property
    def text(self) -> str:
        return f"StudentNetwork{self.shape}"


def fit_student_network_lfs(X, y, n: int, cfg: DownstreamConfig, num_classes: int,
                            seed: int = 0) -> list[StudentNetworkLF]:
    """``n`` networks with randomly drawn layer sizes, trained with class-weighted cross entropy."""
    if n < 1:
        raise ValueError("n must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    rng = np.random.default_rng(seed)
    recurrent = X.ndim == 3
    cw = balanced_class_weights(y, num_classes)
    out = []
    for i in range(n):
        shape = sample_student_shape(rng, recurrent)
        c = replace(cfg, skip_weak_labels=False, seed=seed * 1000 + i,
                    architecture="recurrent" if recurrent else "feedforward", **shape)
        clf = train_classifier(X, y, None, c, num_classes, class_weights=cw)
        out.append(StudentNetworkLF(clf, shape))
    return out
