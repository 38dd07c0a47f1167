import json
import warnings

import numpy as np
import pytest

from lfsynth.dsl import to_text
from lfsynth.synth import (
    DegenerateLabels,
    LFSet,
    SynthConfig,
    Synthesizer,
    autoswap,
    f1_cost,
    synthesize_one,
)
from toy import search_data, search_grammar, toy_library, toy_synth_config


def _manual_f1(y, pred, c):
    tp = np.sum((pred == c) & (y == c))
    fp = np.sum((pred == c) & (y != c))
    fn = np.sum((pred != c) & (y == c))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def test_f1_cost_binary_and_macro():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    p = rng.dirichlet([1, 1], 200)
    assert f1_cost(p, y) == pytest.approx(1 - _manual_f1(y, p.argmax(1), 1))
    y3 = rng.integers(0, 3, 200)
    p3 = rng.dirichlet([1, 1, 1], 200)
    macro = np.mean([_manual_f1(y3, p3.argmax(1), c) for c in range(3)])
    assert f1_cost(p3, y3) == pytest.approx(1 - macro)


def test_f1_cost_warns_on_missing_class():
    with pytest.warns(DegenerateLabels):
        f1_cost(np.array([[0.2, 0.3, 0.5]]), np.array([2]))
    with pytest.raises(ValueError):
        f1_cost(np.zeros((0, 2)), np.zeros(0))


def test_search_finds_good_program():
    g = search_grammar()
    X, y = search_data(0)
    res = synthesize_one(g, X, y, [], toy_synth_config(0, diversity_weight=0.0))
    assert res.arch.is_complete and not res.budget_exceeded
    assert res.f1_cost < 0.2
    assert "C" not in to_text(res.arch).replace("Const", "")


def test_budget_fallback_returns_complete_program():
    g = search_grammar()
    X, y = search_data(1)
    cfg = toy_synth_config(1, frontier_limit=3)
    res = synthesize_one(g, X, y, [], cfg)
    assert res.budget_exceeded
    assert res.arch.is_complete
    assert np.isfinite(res.cost)


def test_cache_reuses_training():
    g = search_grammar()
    X, y = search_data(2)
    cfg = toy_synth_config(2, diversity_weight=0.0)
    syn = Synthesizer(g, X, y, cfg)
    synthesize_one(g, X, y, [], cfg, syn)
    n = syn.trainings
    synthesize_one(g, X, y, [], cfg, syn)
    assert syn.trainings == n


def test_autoswap_set_is_diverse_and_serializes(tmp_path):
    g = search_grammar()
    X, y = search_data(3)
    lfs = autoswap(g.library, g, X * 5 + 2, y, toy_synth_config(3, num_lfs=3))
    assert len(lfs) == 3
    D = lfs.ted_matrix()
    assert np.all(D[np.triu_indices(3, 1)] > 0)
    path = tmp_path / "lfs.json"
    path.write_text(json.dumps(lfs.to_dict()))
    back = LFSet.from_dict(json.loads(path.read_text()))
    assert back.texts == lfs.texts
    for a, b in zip(lfs.predict_proba(X), back.predict_proba(X)):
        np.testing.assert_allclose(a, b)


def test_autoswap_without_diversity_repeats():
    g = search_grammar()
    X, y = search_data(4)
    lfs = autoswap(g.library, g, X, y, toy_synth_config(4, num_lfs=2, diversity_weight=0.0))
    assert lfs.texts[0] == lfs.texts[1]


def test_autoswap_input_checks():
    g = search_grammar()
    X, y = search_data(0)
    with pytest.raises(ValueError):
        autoswap(g.library, g, X[:0], y[:0], toy_synth_config(0))
    with pytest.raises(ValueError):
        autoswap(toy_library(("A", "B")), g, X, y, toy_synth_config(0))
    assert len(autoswap(g.library, g, X, y, toy_synth_config(0, num_lfs=0))) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(frontier_limit=0)
    with pytest.raises(ValueError):
        SynthConfig(diversity_weight=-1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert SynthConfig().with_seed(7).diff.seed == 7
