"""Tree edit distance and the structural diversity cost over program trees."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dsl import Grammar, ProgramArchitecture, StructTree, to_struct_tree


@dataclass(frozen=True)
class DiversityConfig:
    q: str = "power"  # "power" or "linear"
    q_param: float = 2.0  # exponent or slope
    cost_cap: float = 1e6

    def __post_init__(self):
        if self.q not in ("power", "linear"):
            raise ValueError(f"unknown q {self.q!r}")
        if self.q_param <= 0 or self.cost_cap <= 0:
            raise ValueError("q parameter and cost_cap must be positive")

    def qfn(self, x: float) -> float:
        return x ** self.q_param if self.q == "power" else self.q_param * x


# --------------------------------------------------------------------------
# Zhang-Shasha


class _Annotated:
    """Postorder numbering, leftmost-leaf descendants and keyroots of a tree."""

    def __init__(self, root: StructTree | None):
        self.labels: list[str] = []
        self.lmd: list[int] = []
        if root is not None:
            self._visit(root)
        n = len(self.labels)
        seen = {}
        # keyroot = highest-numbered node for each distinct leftmost leaf
        for i in range(n):
            seen[self.lmd[i]] = i
        self.keyroots = sorted(seen.values())

    def _visit(self, t: StructTree) -> int:
        first = None
        for c in t.children:
            leaf = self._visit(c)
            if first is None:
                first = leaf
        idx = len(self.labels)
        self.labels.append(t.label)
        self.lmd.append(idx if first is None else self.lmd[first])
        return idx


def zss_distance(t1: StructTree | None, t2: StructTree | None) -> int:
    """Unit-cost ordered tree edit distance (insert, delete, relabel)."""
    A, B = _Annotated(t1), _Annotated(t2)
    n, m = len(A.labels), len(B.labels)
    if n == 0 or m == 0:
        return n + m
    td = np.zeros((n, m), dtype=np.int64)
    for i in A.keyroots:
        for j in B.keyroots:
            _treedist(A, B, i, j, td)
    return int(td[n - 1, m - 1])


def _treedist(A: _Annotated, B: _Annotated, i: int, j: int, td: np.ndarray) -> None:
    li, lj = A.lmd[i], B.lmd[j]
    rows, cols = i - li + 2, j - lj + 2
    fd = [[0] * cols for _ in range(rows)]
    for x in range(1, rows):
        fd[x][0] = fd[x - 1][0] + 1
    for y in range(1, cols):
        fd[0][y] = fd[0][y - 1] + 1
    for x in range(1, rows):
        ii = li + x - 1
        for y in range(1, cols):
            jj = lj + y - 1
            if A.lmd[ii] == li and B.lmd[jj] == lj:
                relabel = 0 if A.labels[ii] == B.labels[jj] else 1
                fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[x - 1][y - 1] + relabel)
                td[ii, jj] = fd[x][y]
            else:
                p, q = A.lmd[ii] - li, B.lmd[jj] - lj
                fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1, fd[p][q] + td[ii, jj])


# --------------------------------------------------------------------------
# diversity cost


def _tree(p) -> StructTree | None:
    if isinstance(p, ProgramArchitecture):
        return to_struct_tree(p)
    return p


def mean_ted(p, pool: Sequence) -> float:
    t = _tree(p)
    return float(np.mean([zss_distance(t, _tree(q)) for q in pool]))


def _inverse_q(mean: float, cfg: DiversityConfig) -> float:
    qv = cfg.qfn(mean)
    if qv <= 0:
        return cfg.cost_cap
    return min(1.0 / qv, cfg.cost_cap)


def structural_cost(P, pool: Sequence, cfg: DiversityConfig = DiversityConfig()) -> float:
    """1 / q(mean TED to the pool); 0 for an empty pool, ``cost_cap`` at mean TED 0."""
    if len(pool) == 0:
        return 0.0
    return _inverse_q(mean_ted(P, pool), cfg)


def diversity_heuristic(P_I, pool: Sequence, m: int, cfg: DiversityConfig = DiversityConfig()) -> float:
    """Lower bound on the structural cost of any completion of ``P_I``.

    Each unknown variable can add at most one edit, so the TED to a pool tree
    grows by at most ``m - ||P_I||`` where ``m`` bounds the node count of a
    complete program.
    """
    if len(pool) == 0:
        return 0.0
    t = _tree(P_I)
    known = 0 if t is None else t.size
    slack = max(m - known, 0)
    u = float(np.mean([slack + zss_distance(t, _tree(q)) for q in pool]))
    return _inverse_q(u, cfg)


def heuristic_bound(grammar: Grammar) -> int:
    """Node-count bound used for ``m`` in the heuristic."""
    return grammar.max_nodes()


def pairwise_ted(programs: Sequence) -> np.ndarray:
    trees = [_tree(p) for p in programs]
    n = len(trees)
    D = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = zss_distance(trees[i], trees[j])
    return D


def mean_pairwise_ted(programs: Sequence) -> float:
    n = len(programs)
    if n < 2:
        return 0.0
    D = pairwise_ted(programs)
    return float(D[np.triu_indices(n, 1)].mean())
