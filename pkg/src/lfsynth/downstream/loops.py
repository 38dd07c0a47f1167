"""Active-learning and weak-supervision experiment loops."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ..dsl import DomainLFLibrary, Grammar
from ..labelmodel import ABSTAIN, InsufficientVotes, NoViableThreshold, apply_abstain, fit, weak_labels
from ..synth import SYNTH_PRESETS, SynthConfig, autoswap
from .baselines import feature_groups, fit_decision_tree_lfs, fit_student_network_lfs
from .classifier import DOWNSTREAM_PRESETS, DownstreamConfig, train_classifier
from .metrics import max_entropy_select, task_map

log = logging.getLogger(__name__)

GENERATORS = ("autoswap", "decision_tree", "student_network")
SAMPLERS = ("max_entropy", "random")

PAPER_FRAME_SCHEDULE = (1000, 2000, 3500, 5000, 7500, 12500, 25000, 50000)
SYNTHETIC_SCHEDULE = tuple(a // 10 for a in PAPER_FRAME_SCHEDULE)
WS_MULTIPLIERS = (0, 1, 2, 3, 4, 5)


class LoopError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    num_lfs: int = 3
    synth: SynthConfig = field(default_factory=lambda: SYNTH_PRESETS["synthetic"])
    downstream: DownstreamConfig = field(default_factory=lambda: DOWNSTREAM_PRESETS["synthetic"])
    student: DownstreamConfig = field(default_factory=lambda: DOWNSTREAM_PRESETS["synthetic"])
    min_coverage: float = 0.1
    use_labeled_prior: bool = True


def check_schedule(schedule) -> list[int]:
    s = [int(a) for a in schedule]
    if not s or any(b <= a for a, b in zip(s, s[1:])) or s[0] < 0:
        raise ValueError(f"schedule must be non-empty and strictly increasing, got {s}")
    return s


def generate_lfs(kind: str, library: DomainLFLibrary, grammar: Grammar, X, y, cfg: LoopConfig, seed: int):
    """Task-level LFs from labeled data; every returned object has ``predict_proba``."""
    k = grammar.num_classes
    if kind == "autoswap":
        scfg = replace(cfg.synth, num_lfs=cfg.num_lfs).with_seed(seed)
        return list(autoswap(library, grammar, X, y, scfg))
    if kind == "decision_tree":
        return fit_decision_tree_lfs(X, y, feature_groups(library), cfg.num_lfs, k, seed, cfg.min_coverage)
    if kind == "student_network":
        return fit_student_network_lfs(X, y, cfg.num_lfs, cfg.student, k, seed)
    raise ValueError(f"unknown LF generator {kind!r}; expected one of {GENERATORS}")


def lf_features(lfs, X) -> np.ndarray:
    return np.concatenate([lf.predict_proba(X) for lf in lfs], 1) if lfs else np.zeros((len(X), 0))


def _describe(lfs) -> list[str]:
    return [getattr(lf, "text", type(lf).__name__) for lf in lfs]


def active_learning_run(library: DomainLFLibrary, grammar: Grammar, dataset, schedule,
                        lf_generator: str = "autoswap", sampling: str = "max_entropy",
                        cfg: LoopConfig = LoopConfig(), seed: int = 0) -> list[dict]:
    """Label ``A_1`` random pool rows, then at each amount regenerate LFs, train, report and query more.

    The pool is the dataset's train split and mAP is measured on its test split.
    Each row of the result also records the labeled indices used at that amount.
    """
    if sampling not in SAMPLERS:
        raise ValueError(f"unknown sampling {sampling!r}")
    schedule = check_schedule(schedule)
    X, y = dataset.domain_lf_values, dataset.labels
    pool = dataset.indices("train")
    test = dataset.indices("test")
    if schedule[-1] > len(pool):
        raise ValueError(f"schedule needs {schedule[-1]} labels but the pool has {len(pool)} rows")
    k = dataset.num_classes
    rng = np.random.default_rng(seed)
    labeled = rng.choice(pool, schedule[0], replace=False)
    dcfg = replace(cfg.downstream, skip_weak_labels=True, seed=seed)
    rows, clf = [], None
    for i, amount in enumerate(schedule):
        t0 = time.time()
        assert len(labeled) == amount
        try:
            lfs = generate_lfs(lf_generator, library, grammar, X[labeled], y[labeled], cfg, seed * 100 + i)
            clf = train_classifier(X[labeled], y[labeled], lf_features(lfs, X[labeled]), dcfg, k, init=clf)
        except Exception as e:
            raise LoopError(f"amount index {i} ({amount} labels): {e}") from e
        probs = clf.predict_proba(X[test], lf_features(lfs, X[test]))
        rows.append({"amount": amount, "seed": seed, "generator": lf_generator, "sampler": sampling,
                     "map": task_map(probs, y[test], k), "lfs": _describe(lfs),
                     "labeled": np.sort(labeled).tolist(), "seconds": round(time.time() - t0, 2)})
        log.info("AL %s/%s seed %d amount %d: mAP %.4f", lf_generator, sampling, seed, amount, rows[-1]["map"])
        if i + 1 < len(schedule):
            rest = np.setdiff1d(pool, labeled)
            need = schedule[i + 1] - amount
            if sampling == "max_entropy":
                pick = rest[max_entropy_select(clf.predict_proba(X[rest], lf_features(lfs, X[rest])), need)]
            else:
                pick = rng.choice(rest, need, replace=False)
            labeled = np.concatenate([labeled, pick])
    return rows


def weak_supervision_run(library: DomainLFLibrary, grammar: Grammar, dataset, labeled, unlabeled, schedule,
                         lf_generator: str = "autoswap", cfg: LoopConfig = LoopConfig(),
                         seed: int = 0) -> list[dict]:
    """Synthesize LFs once, weak-label the unlabeled rows and train on labeled + weak-labeled subsets.

    ``schedule`` holds multipliers of the labeled-set size.  Every row reports the
    weak-label mAP and the mAP obtained with the same rows carrying ground truth.
    """
    schedule = check_schedule(schedule)
    X, y = dataset.domain_lf_values, dataset.labels
    labeled, unlabeled = np.asarray(labeled), np.asarray(unlabeled)
    if len(labeled) == 0:
        raise ValueError("weak supervision needs labeled rows")
    if np.intersect1d(labeled, unlabeled).size:
        raise ValueError("labeled and unlabeled rows overlap")
    if schedule[-1] * len(labeled) > len(unlabeled):
        raise ValueError("not enough unlabeled rows for the largest multiplier")
    k = dataset.num_classes
    test = dataset.indices("test")
    try:
        lfs = generate_lfs(lf_generator, library, grammar, X[labeled], y[labeled], cfg, seed)
    except Exception as e:
        raise LoopError(f"LF generation: {e}") from e
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoViableThreshold)
        abst = [apply_abstain(lf, X[labeled], y[labeled], k, cfg.min_coverage) for lf in lfs]
    votes = np.stack([a.votes(X[unlabeled]) for a in abst], 1)
    usable = (votes != ABSTAIN).any(0)
    prior = y[labeled] if cfg.use_labeled_prior else None
    if usable.sum() >= 2:
        lm = fit(votes[:, usable], k, prior)
        wl = weak_labels(lm, votes[:, usable])
    elif usable.sum() == 1:
        # a single voting LF: trust its votes, fall back to the prior where it abstains
        lm = fit(np.repeat(votes[:, usable], 2, 1), k, prior)
        wl = weak_labels(lm, np.repeat(votes[:, usable], 2, 1))
    else:
        raise InsufficientVotes("no LF votes on the unlabeled rows")
    rng = np.random.default_rng(seed)
    dcfg = replace(cfg.downstream, skip_weak_labels=False, seed=seed)
    rows = []
    for i, mult in enumerate(schedule):
        t0 = time.time()
        n_weak = mult * len(labeled)
        pick = rng.choice(len(unlabeled), n_weak, replace=False)
        Xtr = np.concatenate([X[labeled], X[unlabeled[pick]]])
        onehot = np.eye(k)[y[labeled]]
        soft = np.concatenate([onehot, wl[pick]])
        hard = np.concatenate([onehot, np.eye(k)[y[unlabeled[pick]]]])
        try:
            clf = train_classifier(Xtr, soft, None, dcfg, k)
            clf_gt = train_classifier(Xtr, hard, None, dcfg, k)
        except Exception as e:
            raise LoopError(f"multiplier index {i} ({mult}x): {e}") from e
        rows.append({
            "multiplier": mult, "amount": len(labeled) + n_weak, "seed": seed, "generator": lf_generator,
            "map": task_map(clf.predict_proba(X[test]), y[test], k),
            "map_ground_truth": task_map(clf_gt.predict_proba(X[test]), y[test], k),
            "weak_label_accuracy": float((wl[pick].argmax(1) == y[unlabeled[pick]]).mean()) if n_weak else None,
            "coverage": [float((v != ABSTAIN).mean()) for v in votes.T],
            "taus": [a.tau for a in abst], "lfs": _describe(lfs),
            "seconds": round(time.time() - t0, 2),
        })
        log.info("WS %s seed %d %dx: mAP %.4f (ground truth %.4f)", lf_generator, seed, mult, rows[-1]["map"],
                 rows[-1]["map_ground_truth"])
    return rows
