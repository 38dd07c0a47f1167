"""Small grammars and datasets that can be enumerated exhaustively."""
from __future__ import annotations

import numpy as np

from lfsynth.diffexec import DiffConfig
from lfsynth.dsl import DomainLFLibrary, GrammarOptions, build_grammar, enumerate_complete
from lfsynth.synth import SynthConfig


def toy_library(names=("A", "B")) -> DomainLFLibrary:
    return DomainLFLibrary.from_specs([(n, 1, n.lower()) for n in names])


def add_grammar(max_depth: int = 4):
    """Two scalar LFs combined by Add only; every program is purely structural."""
    return build_grammar(toy_library(), 2, max_depth, GrammarOptions(ops=("add",)))


def search_grammar(max_depth: int = 2):
    """Three scalar LFs under the default operator set, small enough to enumerate."""
    return build_grammar(toy_library(("A", "B", "C")), 2, max_depth)


def search_data(seed: int, n: int = 400):
    """Positive iff A + B > 0.5; C is noise."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (X[:, 0] + X[:, 1] > 0.5).astype(int)
    return X, y


TOY_DIFF = DiffConfig(lr_symbolic=0.1, lr_completion=0.05, epochs_symbolic=40, epochs_completion=20,
                      batches_per_epoch=4, completion_width=4)


def toy_synth_config(seed: int = 0, **kw) -> SynthConfig:
    kw = {"frontier_limit": 10_000, "diff": TOY_DIFF, **kw}
    return SynthConfig(seed=seed, **kw).with_seed(seed)


def all_programs(grammar):
    return list(enumerate_complete(grammar))
