"""Abstaining LFs and a generative label model over their votes.

Each LF j has an accuracy a_j and a labeling propensity b_j; given the true
class y, it abstains with probability 1 - b_j, votes y with probability
b_j * a_j and any other class with b_j * (1 - a_j) / (k - 1).  LFs are
conditionally independent given y.  Parameters are fit by EM on the marginal
likelihood of the votes.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.metrics import f1_score

ABSTAIN = -1


class LabelModelError(Exception):
    pass


class InsufficientVotes(LabelModelError, ValueError):
    pass


class NoViableThreshold(UserWarning):
    pass


class DegenerateVotes(UserWarning):
    pass


# --------------------------------------------------------------------------
# abstain


def _f1(y, pred, k):
    present = np.unique(y)
    if k == 2 and 1 in present:
        return f1_score(y, pred, pos_label=1, average="binary", zero_division=0)
    return f1_score(y, pred, labels=present, average="macro", zero_division=0)


@dataclass
class AbstainingLF:
    """Votes argmax when the top class probability reaches ``tau``, else abstains."""

    predict_proba: Callable
    tau: float
    num_classes: int
    fallback: bool = False
    coverage: float = 1.0
    f1: float = float("nan")
    name: str = ""

    def votes_from_probs(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs)
        v = probs.argmax(1)
        # small slack so a threshold equal to a stored probability is inclusive
        return np.where(probs.max(1) >= self.tau - 1e-12, v, ABSTAIN)

    def votes(self, X) -> np.ndarray:
        return self.votes_from_probs(self.predict_proba(X))


def select_threshold(probs: np.ndarray, y: np.ndarray, num_classes: int, min_coverage: float = 0.1,
                     f1_tolerance: float = 0.01) -> tuple[float, bool, float, float]:
    """(tau, fallback, coverage, f1) maximising F1 of non-abstained votes.

    Among thresholds whose F1 is within ``f1_tolerance`` of the best, the one
    with the largest coverage is kept.
    """
    probs = np.asarray(probs)
    y = np.asarray(y).astype(int)
    conf = probs.max(1)
    pred = probs.argmax(1)
    floor = 1.0 / num_classes
    cands = np.unique(conf[conf > floor + 1e-12])
    rows = []
    for tau in cands:
        cov_mask = conf >= tau - 1e-12
        cov = cov_mask.mean()
        if cov < min_coverage:
            continue
        rows.append((tau, cov, _f1(y[cov_mask], pred[cov_mask], num_classes)))
    if not rows:
        warnings.warn("no threshold reaches the coverage floor; the LF will never abstain", NoViableThreshold,
                      stacklevel=2)
        return floor, True, 1.0, _f1(y, pred, num_classes)
    best = max(r[2] for r in rows)
    ok = [r for r in rows if r[2] >= best - f1_tolerance]
    tau, cov, f1 = max(ok, key=lambda r: (r[1], -r[0]))
    return float(tau), False, float(cov), float(f1)


def apply_abstain(lf, X, y, num_classes: int, min_coverage: float = 0.1, f1_tolerance: float = 0.01,
                  name: str = "") -> AbstainingLF:
    """Wrap ``lf`` (anything with ``predict_proba`` or a callable) with a tuned abstain threshold."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("apply_abstain needs a non-empty labeled split")
    fn = lf.predict_proba if hasattr(lf, "predict_proba") else lf
    tau, fallback, cov, f1 = select_threshold(fn(X), y, num_classes, min_coverage, f1_tolerance)
    return AbstainingLF(fn, tau, num_classes, fallback, cov, f1, name)


# --------------------------------------------------------------------------
# label model


@dataclass
class LabelModelParams:
    theta_acc: np.ndarray
    theta_lab: np.ndarray
    class_prior: np.ndarray
    accuracy: np.ndarray
    propensity: np.ndarray
    num_classes: int
    n_iter: int = 0
    converged: bool = False
    log_likelihood: float = float("nan")
    degenerate: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> LabelModelParams:
        d = dict(d)
        for k in ("theta_acc", "theta_lab", "class_prior", "accuracy", "propensity"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


_EPS = 1e-4


def _to_theta(acc, prop, k):
    acc = np.clip(acc, _EPS, 1 - _EPS)
    prop = np.clip(prop, 1e-6, 1 - 1e-6)
    theta_acc = np.log(acc * (k - 1) / (1 - acc))
    theta_lab = np.log(prop / (1 - prop)) - np.log(np.exp(theta_acc) + k - 1)
    return theta_acc, theta_lab


def _log_evidence(votes: np.ndarray, acc: np.ndarray, k: int) -> np.ndarray:
    """log P(votes_i | y) up to the y-independent propensity terms, shape (n, k)."""
    n, m = votes.shape
    out = np.zeros((n, k))
    la = np.log(np.clip(acc, _EPS, 1 - _EPS))
    lw = np.log(np.clip((1 - acc) / (k - 1), 1e-12, None))
    for j in range(m):
        v = votes[:, j]
        on = v != ABSTAIN
        out[on] += lw[j]
        out[np.flatnonzero(on), v[on]] += la[j] - lw[j]
    return out


def _posterior(votes, acc, prior, k):
    """Per-row posterior and the total marginal log-likelihood (propensity terms dropped)."""
    logp = _log_evidence(votes, acc, k) + np.log(prior)
    mx = logp.max(1, keepdims=True)
    p = np.exp(logp - mx)
    s = p.sum(1, keepdims=True)
    return p / s, float(np.sum(np.log(s[:, 0]) + mx[:, 0]))


def _prior_from(anchor, votes, k):
    if anchor is not None:
        anchor = np.asarray(anchor)
        if anchor.ndim == 1 and anchor.dtype.kind in "iu":
            counts = np.bincount(anchor, minlength=k).astype(float)
        else:
            counts = np.asarray(anchor, dtype=float).reshape(-1, k).sum(0)
    else:
        v = votes[votes != ABSTAIN]
        counts = np.bincount(v, minlength=k).astype(float)
    p = counts / max(counts.sum(), 1) + 1e-6
    return p / p.sum()


def fit(votes, num_classes: int, labeled_anchor=None, max_iter: int = 200, tol: float = 1e-6,
        init_accuracy: float = 0.7, min_lfs: int = 2) -> LabelModelParams:
    """EM fit of LF accuracies; the class prior is held fixed.

    ``labeled_anchor`` is either class labels or a probability vector; without
    it the prior is the empirical frequency of non-abstain votes.
    """
    votes = np.asarray(votes).astype(np.int64)
    if votes.ndim != 2:
        raise ValueError("votes must be an (n, m) matrix")
    k = num_classes
    n, m = votes.shape
    if m < min_lfs:
        raise InsufficientVotes(f"need at least {min_lfs} LFs, got {m}")
    if votes.max(initial=ABSTAIN) >= k or votes.min(initial=0) < ABSTAIN:
        raise ValueError("votes must be class indices or ABSTAIN")
    on = votes != ABSTAIN
    if not on.any(0).all():
        raise InsufficientVotes(f"LFs {np.flatnonzero(~on.any(0)).tolist()} never vote")
    prior = _prior_from(labeled_anchor, votes, k)
    prop = on.mean(0)
    degenerate = [j for j in range(m) if np.unique(votes[:, j]).size == 1]
    if degenerate:
        warnings.warn(f"LFs {degenerate} are constant; their accuracy is clamped to 1/k", DegenerateVotes,
                      stacklevel=2)
    acc = np.full(m, init_accuracy)
    acc[degenerate] = 1.0 / k
    free = np.setdiff1d(np.arange(m), degenerate)
    prev = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q, ll = _posterior(votes, acc, prior, k)
        for j in free:
            rows = np.flatnonzero(on[:, j])
            acc[j] = q[rows, votes[rows, j]].mean()
        acc = np.clip(acc, _EPS, 1 - _EPS)
        acc[degenerate] = 1.0 / k
        if ll - prev < tol:
            converged = True
            break
        prev = ll
    _, ll = _posterior(votes, acc, prior, k)
    theta_acc, theta_lab = _to_theta(acc, prop, k)
    return LabelModelParams(theta_acc, theta_lab, prior, acc.copy(), prop, k, it, converged, ll, degenerate)


def weak_labels(params: LabelModelParams, votes) -> np.ndarray:
    votes = np.asarray(votes).astype(np.int64)
    if votes.shape[1] != len(params.accuracy):
        raise ValueError("vote matrix does not match the fitted LF set")
    # recover accuracies from the log-linear weights so stored params are self-contained
    k = params.num_classes
    e = np.exp(params.theta_acc)
    acc = e / (e + k - 1)
    p, _ = _posterior(votes, acc, params.class_prior, k)
    return p


def majority_vote(votes, num_classes: int, tie: str = "uniform") -> np.ndarray:
    """Vote shares; ties split evenly (``uniform``) and all-abstain rows are uniform."""
    votes = np.asarray(votes)
    counts = np.zeros((len(votes), num_classes))
    for j in range(votes.shape[1]):
        on = votes[:, j] != ABSTAIN
        counts[np.flatnonzero(on), votes[on, j]] += 1
    top = counts == counts.max(1, keepdims=True)
    return top / top.sum(1, keepdims=True)


# --------------------------------------------------------------------------
# serialization


def votes_to_csv(votes, names: Sequence[str], taus: Sequence[float] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    if taus is not None:
        w.writerow(["# tau"] + [f"{t:.6g}" for t in taus])
    w.writerow(list(names))
    for row in np.asarray(votes):
        w.writerow(["ABSTAIN" if v == ABSTAIN else int(v) for v in row])
    return buf.getvalue()


def votes_from_csv(text: str) -> tuple[np.ndarray, list[str], list[float] | None]:
    rows = list(csv.reader(io.StringIO(text)))
    taus = None
    if rows and rows[0] and rows[0][0] == "# tau":
        taus = [float(t) for t in rows[0][1:]]
        rows = rows[1:]
    names = rows[0]
    votes = np.array([[ABSTAIN if v == "ABSTAIN" else int(v) for v in r] for r in rows[1:]],
                     dtype=np.int64).reshape(-1, len(names))
    return votes, names, taus
