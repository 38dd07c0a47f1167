"""Informed search over program architectures and the diverse LF synthesis loop."""
from __future__ import annotations

import heapq
import itertools
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.metrics import f1_score

from .diffexec import (
    DIFF_PRESETS,
    DiffConfig,
    DivergedTraining,
    NonFiniteIntermediate,
    ParameterStore,
    complete_with_neural,
    evaluate,
    train_params,
)
from .diversity import (
    DiversityConfig,
    diversity_heuristic,
    heuristic_bound,
    pairwise_ted,
    structural_cost,
)
from .dsl import Grammar, ProgramArchitecture, parse_program, to_text

log = logging.getLogger(__name__)

INF = float("inf")


class SynthesisError(Exception):
    pass


class FrontierExhausted(SynthesisError):
    pass


class BudgetExceeded(SynthesisError):
    pass


class DegenerateLabels(UserWarning):
    pass


def f1_cost(probs, labels, num_classes: int | None = None) -> float:
    """1 - F1 of argmax predictions (positive class if binary, else macro over present classes)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(int)
    if len(labels) == 0:
        raise ValueError("f1_cost needs at least one example")
    k = num_classes or probs.shape[1]
    pred = probs.argmax(1)
    present = np.unique(labels)
    if len(present) < k:
        warnings.warn(f"classes {sorted(set(range(k)) - set(present.tolist()))} absent from labels; "
                      "scoring over present classes", DegenerateLabels, stacklevel=2)
    if k == 2 and 1 in present:
        f1 = f1_score(labels, pred, pos_label=1, average="binary", zero_division=0)
    else:
        f1 = f1_score(labels, pred, labels=present, average="macro", zero_division=0)
    return float(1.0 - f1)


@dataclass(frozen=True)
class SynthConfig:
    num_lfs: int = 3
    max_depth: int | None = None  # None: grammar default
    frontier_limit: int = 500
    seed: int = 0
    f1_weight: float = 1.0
    diversity_weight: float = 1.0
    interior_diversity: bool = True
    standardize: bool = True
    diff: DiffConfig = field(default_factory=DiffConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)

    def __post_init__(self):
        if self.num_lfs < 0:
            raise ValueError("num_lfs must be >= 0")
        if self.frontier_limit < 1:
            raise ValueError("frontier_limit must be positive")
        if self.f1_weight < 0 or self.diversity_weight < 0:
            raise ValueError("cost weights must be non-negative")

    def with_seed(self, seed: int) -> SynthConfig:
        return replace(self, seed=seed, diff=replace(self.diff, seed=seed))


SYNTH_PRESETS = {
    "default": SynthConfig(),
    "synthetic": SynthConfig(frontier_limit=300, diff=DIFF_PRESETS["synthetic"]),
}


@dataclass(eq=False)
class SearchNode:
    arch: ProgramArchitecture
    priority: float = INF
    completion_cost: float = INF
    diversity_bound: float = 0.0
    parent: SearchNode | None = None
    params: ParameterStore | None = None
    f1: float = INF

    @property
    def complete(self) -> bool:
        return self.arch.is_complete


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> Standardizer:
        flat = X.reshape(-1, X.shape[-1])
        std = flat.std(0)
        std[std < 1e-8] = 1.0
        return cls(flat.mean(0), std)

    @classmethod
    def identity(cls, width: int) -> Standardizer:
        return cls(np.zeros(width), np.ones(width))

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


class Synthesizer:
    """Scores architectures on one labeled set; training results are cached by architecture text."""

    def __init__(self, grammar: Grammar, X, y, cfg: SynthConfig = SynthConfig()):
        self.grammar = grammar
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y).astype(int)
        self.cfg = cfg
        self.k = grammar.num_classes
        self.m = heuristic_bound(grammar)
        self._cache: dict[str, tuple[float, ParameterStore | None]] = {}
        self.trainings = 0

    def _train(self, arch: ProgramArchitecture) -> tuple[float, ParameterStore | None]:
        key = to_text(arch)
        if key not in self._cache:
            self.trainings += 1
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateLabels)
                    res = train_params(arch, self.X, self.y, self.cfg.diff,
                                       cost_fn=lambda p, y: f1_cost(p, y, self.k))
                self._cache[key] = (res.cost, res.params)
            except (DivergedTraining, NonFiniteIntermediate) as e:
                log.debug("training diverged for %s: %s", key, e)
                self._cache[key] = (INF, None)
        return self._cache[key]

    def score_incomplete(self, node: SearchNode, pool: Sequence) -> SearchNode:
        if node.arch.is_complete:
            raise ValueError("score_incomplete needs an architecture with holes")
        completed = complete_with_neural(node.arch, self.cfg.diff.completion_width)
        f1, _ = self._train(completed)
        node.f1 = f1
        node.completion_cost = self.cfg.f1_weight * f1
        div = 0.0
        if self.cfg.interior_diversity and self.cfg.diversity_weight > 0:
            div = diversity_heuristic(node.arch, pool, self.m, self.cfg.diversity)
        node.diversity_bound = self.cfg.diversity_weight * div
        node.priority = node.completion_cost + node.diversity_bound
        return node

    def score_complete(self, arch: ProgramArchitecture, pool: Sequence) -> tuple[float, ParameterStore | None, float, float]:
        """(total cost, params, f1 cost, structural cost)."""
        if not arch.is_complete:
            raise ValueError("score_complete needs a complete architecture")
        f1, params = self._train(arch)
        div = structural_cost(arch, pool, self.cfg.diversity) if self.cfg.diversity_weight > 0 else 0.0
        return self.cfg.f1_weight * f1 + self.cfg.diversity_weight * div, params, f1, div


@dataclass
class SynthResult:
    arch: ProgramArchitecture
    params: ParameterStore
    cost: float
    f1_cost: float
    diversity_cost: float
    expansions: int
    trainings: int
    budget_exceeded: bool
    wall_time: float


def synthesize_one(grammar: Grammar, X, y, pool: Sequence = (), cfg: SynthConfig = SynthConfig(),
                   synthesizer: Synthesizer | None = None) -> SynthResult:
    """Best-first search from the empty architecture.

    Interior nodes are ranked by neural-completion cost plus the diversity bound,
    complete programs by their trained cost; the first complete program popped
    is returned.  ``frontier_limit`` caps the number of scored nodes.
    """
    t0 = time.time()
    syn = synthesizer or Synthesizer(grammar, X, y, cfg)
    pool = list(pool)
    order = itertools.count()
    frontier: list = []
    scored = 0
    best_complete: tuple | None = None

    def push(node: SearchNode):
        heapq.heappush(frontier, (node.priority, node.arch.node_count, next(order), node))

    def score(arch, parent):
        nonlocal scored, best_complete
        scored += 1
        node = SearchNode(arch, parent=parent)
        if arch.is_complete:
            cost, params, f1, div = syn.score_complete(arch, pool)
            node.priority = node.completion_cost = cost
            node.params, node.f1, node.diversity_bound = params, f1, div
            if params is not None and (best_complete is None or cost < best_complete[0].priority):
                best_complete = (node,)
        else:
            syn.score_incomplete(node, pool)
        return node

    push(score(grammar.empty_architecture(), None))
    expansions = 0
    budget_exceeded = False
    while frontier:
        _, _, _, node = heapq.heappop(frontier)
        if node.complete:
            if node.params is None:
                continue
            return _result(node, expansions, syn, False, t0)
        if scored >= cfg.frontier_limit:
            budget_exceeded = True
            heapq.heappush(frontier, (node.priority, node.arch.node_count, next(order), node))
            break
        expansions += 1
        log.debug("expand %.4f %s", node.priority, to_text(node.arch))
        for child in grammar.children(node.arch):
            push(score(child, node))

    if not budget_exceeded:
        raise FrontierExhausted("search frontier exhausted without a trainable complete program")
    # out of budget: greedily finish the best open node and return the cheaper of that and the
    # best complete program seen during the search
    _, _, _, node = heapq.heappop(frontier)
    while not node.complete:
        kids = [score(c, node) for c in grammar.children(node.arch)]
        if not kids:
            break
        kids.sort(key=lambda n: (n.priority, n.arch.node_count))
        node = kids[0]
        expansions += 1
    if best_complete is None:
        raise BudgetExceeded(f"no trainable complete program within {cfg.frontier_limit} scored nodes")
    return _result(best_complete[0], expansions, syn, True, t0)


def _result(node: SearchNode, expansions, syn: Synthesizer, over_budget: bool, t0) -> SynthResult:
    return SynthResult(node.arch, node.params, node.priority, node.f1, node.diversity_bound,
                       expansions, syn.trainings, over_budget, time.time() - t0)


# --------------------------------------------------------------------------
# LF sets


@dataclass
class SynthesizedLF:
    arch: ProgramArchitecture
    params: ParameterStore
    cost: float
    f1_cost: float
    diversity_cost: float
    standardizer: Standardizer
    beta: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return to_text(self.arch)

    def predict_proba(self, X) -> np.ndarray:
        return evaluate(self.arch, self.params, self.standardizer(X), beta=self.beta)


@dataclass
class LFSet:
    grammar: Grammar
    lfs: list[SynthesizedLF] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.lfs)

    def __iter__(self):
        return iter(self.lfs)

    def __getitem__(self, i):
        return self.lfs[i]

    @property
    def texts(self) -> list[str]:
        return [lf.text for lf in self.lfs]

    def ted_matrix(self) -> np.ndarray:
        return pairwise_ted([lf.arch for lf in self.lfs])

    def predict_proba(self, X) -> list[np.ndarray]:
        return [lf.predict_proba(X) for lf in self.lfs]

    def to_dict(self) -> dict:
        return {
            "kind": "lfsynth.lfset",
            "version": 1,
            "grammar": self.grammar.describe(),
            "config": self.config,
            "programs": [
                {
                    "text": lf.text,
                    "params": lf.params.to_dict(),
                    "cost": lf.cost,
                    "f1_cost": lf.f1_cost,
                    "diversity_cost": lf.diversity_cost,
                    "standardizer": lf.standardizer.to_dict(),
                    "beta": lf.beta,
                    "meta": lf.meta,
                }
                for lf in self.lfs
            ],
            "ted_matrix": self.ted_matrix().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> LFSet:
        if d.get("kind") != "lfsynth.lfset" or d.get("version") != 1:
            raise ValueError("not an LF set archive (version 1)")
        g = Grammar.from_description(d["grammar"])
        lfs = [SynthesizedLF(parse_program(p["text"], g), ParameterStore.from_dict(p["params"]),
                             p["cost"], p["f1_cost"], p["diversity_cost"],
                             Standardizer.from_dict(p["standardizer"]), p.get("beta", 1.0), p.get("meta", {}))
               for p in d["programs"]]
        return cls(g, lfs, d.get("config", {}))


def autoswap(library, grammar: Grammar, X, y, cfg: SynthConfig = SynthConfig()) -> LFSet:
    """Synthesize ``cfg.num_lfs`` programs, each penalised for resembling the earlier ones."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("autoswap needs labeled data")
    if library is not None and grammar.library != library:
        raise ValueError("grammar was built over a different library")
    std = Standardizer.fit(X) if cfg.standardize else Standardizer.identity(X.shape[-1])
    Xs = std(X)
    syn = Synthesizer(grammar, Xs, y, cfg)
    out = LFSet(grammar, [], {"num_lfs": cfg.num_lfs, "seed": cfg.seed,
                              "diversity_weight": cfg.diversity_weight, "f1_weight": cfg.f1_weight})
    pool: list[ProgramArchitecture] = []
    for i in range(cfg.num_lfs):
        try:
            res = synthesize_one(grammar, Xs, y, pool, cfg, synthesizer=syn)
        except SynthesisError as e:
            e.iteration = i
            e.args = (f"iteration {i}: {e.args[0] if e.args else ''}",)
            raise
        pool.append(res.arch)
        out.lfs.append(SynthesizedLF(res.arch, res.params, res.cost, res.f1_cost, res.diversity_cost, std,
                                     cfg.diff.beta,
                                     {"iteration": i, "expansions": res.expansions, "trainings": res.trainings,
                                      "budget_exceeded": res.budget_exceeded,
                                      "wall_time": round(res.wall_time, 3)}))
        log.info("lf %d: %s cost=%.4f (f1 %.4f, div %.4f) expansions=%d", i, to_text(res.arch), res.cost,
                 res.f1_cost, res.diversity_cost, res.expansions)
    return out
