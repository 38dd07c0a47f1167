import itertools
import warnings
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from lfsynth.downstream.baselines import (
    STUDENT_RANGES,
    TooFewGroups,
    feature_groups,
    fit_decision_tree_lfs,
    fit_student_network_lfs,
    prune_lfs,
    sample_student_shape,
    subset_score,
)
from lfsynth.downstream.classifier import DOWNSTREAM_PRESETS, DownstreamConfig, train_classifier
from lfsynth.downstream.loops import LoopConfig, active_learning_run, check_schedule, weak_supervision_run
from lfsynth.downstream.metrics import (
    KTooLarge,
    NoPositives,
    average_precision,
    entropy,
    max_entropy_select,
    mean_average_precision,
    task_map,
)
from lfsynth.synthdata import WorldConfig, dataset_grammar, generate
from oracles import entropy_rows

FAST = replace(DOWNSTREAM_PRESETS["synthetic"], epochs=15)


@lru_cache(maxsize=None)
def small_benchmark():
    ds = generate(WorldConfig(domain="benchmark", num_frames=3000, seed=0))
    return ds, dataset_grammar(ds)


def _manual_ap(scores, labels):
    order = np.argsort(-scores, kind="stable")
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / labels.sum()


def test_average_precision_matches_hand_computation():
    rng = np.random.default_rng(0)
    s = rng.random(100)
    y = rng.random(100) < 0.3
    assert average_precision(s, y) == pytest.approx(_manual_ap(s, y))
    with pytest.raises(NoPositives):
        average_precision(s, np.zeros(100))


def test_map_variants():
    rng = np.random.default_rng(1)
    P = rng.dirichlet([1, 1, 1], 60)
    y = np.arange(60) % 3
    per_class = [_manual_ap(P[:, c], y == c) for c in range(3)]
    assert mean_average_precision(P, y) == pytest.approx(np.mean(per_class))
    assert mean_average_precision(P, y, classes=[1, 2]) == pytest.approx(np.mean(per_class[1:]))
    onehot = np.eye(3)[y]
    assert mean_average_precision(P, onehot, "multilabel_binary") == pytest.approx(np.mean(per_class))
    P2 = rng.dirichlet([1, 1], 60)
    assert task_map(P2, y % 2, 2) == pytest.approx(_manual_ap(P2[:, 1], y % 2 == 1))
    with pytest.raises(ValueError):
        mean_average_precision(P, y, "ranking")


def test_entropy_and_selection():
    P = np.array([[1.0, 0.0], [0.5, 0.5], [0.9, 0.1], [0.5, 0.5]])
    np.testing.assert_allclose(entropy(P), entropy_rows(P))
    assert max_entropy_select(P, 3).tolist() == [1, 3, 2]
    assert max_entropy_select(P, 0).tolist() == []
    with pytest.raises(KTooLarge):
        max_entropy_select(P, 5)


def test_classifier_learns_and_accepts_soft_labels():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 4))
    y = (X[:, 0] - X[:, 1] > 0).astype(int)
    clf = train_classifier(X, y, None, FAST, 2)
    assert (clf.predict_proba(X).argmax(1) == y).mean() > 0.9
    soft = np.stack([1 - y, y], 1) * 0.8 + 0.1
    clf = train_classifier(X, soft, None, FAST, 2)
    assert (clf.predict_proba(X).argmax(1) == y).mean() > 0.9


def test_weak_label_skip_connections():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 3))
    y = (X[:, 0] > 0).astype(int)
    W = np.eye(2)[y]
    clf = train_classifier(X, y, W, replace(FAST, skip_weak_labels=True), 2)
    assert clf.predict_proba(X, W).shape == (100, 2)
    with pytest.raises(ValueError):
        clf.predict_proba(X)
    with pytest.raises(ValueError):
        train_classifier(X, y, W[:10], replace(FAST, skip_weak_labels=True), 2)


def test_recurrent_classifier_shapes():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 6, 3))
    y = np.arange(40) % 3
    cfg = replace(DOWNSTREAM_PRESETS["synthetic_recurrent"], epochs=2)
    assert train_classifier(X, y, None, cfg, 3).predict_proba(X).shape == (40, 3)


def test_downstream_config_validation():
    with pytest.raises(ValueError):
        DownstreamConfig(architecture="transformer")
    with pytest.raises(ValueError):
        DownstreamConfig(hidden=(8,), dropout=(0.1, 0.2))


def test_prune_is_exhaustive_optimum():
    rng = np.random.default_rng(2)
    f1s = rng.random(6)
    masks = rng.random((6, 50)) < 0.5
    best = max(itertools.combinations(range(6), 3), key=lambda c: subset_score(c, f1s, masks))
    assert prune_lfs(f1s, masks, 3) == list(best)
    assert len(prune_lfs(f1s, masks, 3, max_subsets=1)) == 3
    with pytest.raises(TooFewGroups):
        prune_lfs(f1s, masks, 7)


def test_decision_tree_lfs():
    ds, _ = small_benchmark()
    X, y = ds.split("train")
    groups = feature_groups(ds.library)
    assert sorted(c for cols in groups.values() for c in cols) == list(range(ds.library.width))
    lfs = fit_decision_tree_lfs(X[:300], y[:300], groups, 3, 2)
    assert len(lfs) == 3
    assert len({lf.group for lf in lfs}) == 3
    for lf in lfs:
        p = lf.predict_proba(X)
        assert p.shape == (len(X), 2) and np.allclose(p.sum(1), 1)
    with pytest.raises(TooFewGroups):
        fit_decision_tree_lfs(X[:50], y[:50], {"a": [0]}, 2, 2)


def test_student_networks_sample_in_range():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = sample_student_shape(rng)
        for v, key in zip(s["hidden"], ("l1", "l2", "l3")):
            lo, hi = STUDENT_RANGES[key]
            assert lo <= v <= hi
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] > 0).astype(int)
    lfs = fit_student_network_lfs(X, y, 2, replace(FAST, epochs=2), 2, seed=1)
    assert len(lfs) == 2 and lfs[0].predict_proba(X).shape == (60, 2)


def test_active_learning_loop_bookkeeping():
    ds, g = small_benchmark()
    cfg = LoopConfig(downstream=FAST)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = active_learning_run(ds.library, g, ds, (20, 40, 60), "decision_tree", "max_entropy", cfg, 0)
    assert [r["amount"] for r in rows] == [20, 40, 60]
    pool = set(ds.indices("train").tolist())
    for a, b in zip(rows, rows[1:]):
        assert set(a["labeled"]) < set(b["labeled"])
    assert all(set(r["labeled"]) <= pool and len(r["labeled"]) == r["amount"] for r in rows)
    assert all(0 <= r["map"] <= 1 for r in rows)
    with pytest.raises(ValueError):
        active_learning_run(ds.library, g, ds, (10, 10**6), "decision_tree", "random", cfg, 0)
    with pytest.raises(ValueError):
        active_learning_run(ds.library, g, ds, (10, 20), "decision_tree", "oracle", cfg, 0)


def test_weak_supervision_loop_bookkeeping():
    ds, g = small_benchmark()
    cfg = LoopConfig(downstream=FAST)
    train = ds.indices("train")
    labeled, unlabeled = train[:80], train[80:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = weak_supervision_run(ds.library, g, ds, labeled, unlabeled, (0, 2), "decision_tree", cfg, 0)
    assert [r["multiplier"] for r in rows] == [0, 2]
    assert [r["amount"] for r in rows] == [80, 240]
    assert rows[0]["weak_label_accuracy"] is None and 0 <= rows[1]["weak_label_accuracy"] <= 1
    with pytest.raises(ValueError):
        weak_supervision_run(ds.library, g, ds, labeled, train[:100], (0, 1), "decision_tree", cfg, 0)


def test_schedule_validation():
    assert check_schedule([1, 2, 5]) == [1, 2, 5]
    for bad in ([], [2, 1], [3, 3], [-1, 2]):
        with pytest.raises(ValueError):
            check_schedule(bad)
