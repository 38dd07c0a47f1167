import numpy as np
import pytest
from scipy.special import expit, softmax

from lfsynth.diffexec import (
    DiffConfig,
    IncompleteProgram,
    ParameterStore,
    ShapeMismatch,
    complete_with_neural,
    diff_ite,
    evaluate,
    gradient,
    init_params,
    param_slots,
    train_params,
)
from lfsynth.dsl import DomainLFLibrary, GrammarOptions, build_grammar, parse_program
from toy import search_grammar, toy_library


def test_binary_program_matches_numpy():
    g = search_grammar(3)
    arch = parse_program("Map(SimpleITE(Affine(A), Multiply(B, C), Const))", g)
    P = ParameterStore({(0, 0): [2.0, -0.5], (0, 2): [0.3]})
    X = np.random.default_rng(0).normal(size=(50, 3))
    cond = 2.0 * X[:, 0] - 0.5
    s = diff_ite(cond, X[:, 1] * X[:, 2], np.full(50, 0.3), beta=1.0)
    expected = np.stack([1 - expit(s), expit(s)], 1)
    np.testing.assert_allclose(evaluate(arch, P, X), expected, atol=1e-12)


def test_multiclass_sequence_program_matches_numpy():
    lib = DomainLFLibrary.from_specs([("A", 1, "a"), ("V", 2, "v")])
    g = build_grammar(lib, 3, 3, GrammarOptions(task="sequence", seq_len=4, fold_init=0.5))
    arch = parse_program("Fold(Add(Affine(V), Affine(A)))", g)
    rng = np.random.default_rng(1)
    W1, W2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    P = ParameterStore({(0, 0): W1, (0, 1): W2})
    X = rng.normal(size=(7, 4, 3))
    per_frame = X[..., 1:3] @ W1[:, :2].T + W1[:, 2] + X[..., 0:1] @ W2[:, :1].T + W2[:, 1]
    expected = softmax(per_frame.sum(1) + 0.5, axis=1)
    np.testing.assert_allclose(evaluate(arch, P, X), expected, atol=1e-12)


def test_hard_ite_is_a_step():
    g = search_grammar(2)
    arch = parse_program("Map(SimpleITE(A, B, C))", g)
    X = np.array([[0.5, 1.0, -1.0], [-0.5, 1.0, -1.0]])
    raw = evaluate(arch, init_params(arch), X, hard=True, raw=True).ravel()
    np.testing.assert_array_equal(raw, [1.0, -1.0])


def test_diff_ite_rejects_bad_input():
    with pytest.raises(ValueError):
        diff_ite(1.0, 1.0, 0.0, beta=0.0)
    with pytest.raises(ShapeMismatch):
        diff_ite(np.ones(3), np.ones(3), np.ones(2))


def test_parameter_store_round_trip():
    P = ParameterStore({(0,): np.arange(3.0), (0, 1): np.ones((2, 2))})
    Q = ParameterStore.from_json(P.to_json())
    assert P.allclose(Q, atol=0)
    assert P.unflatten(P.flatten()).allclose(P)
    with pytest.raises(ValueError):
        ParameterStore({(0,): [np.nan]})
    with pytest.raises(ShapeMismatch):
        P.unflatten(np.zeros(P.size + 1))


def test_neural_completion_shapes_and_gradient():
    g = search_grammar(2)
    partial = parse_program("Map(SimpleITE(A, ?, ?))", g)
    with pytest.raises(IncompleteProgram):
        evaluate(partial, ParameterStore(), np.zeros((2, 3)))
    done = complete_with_neural(partial, width=4)
    params = init_params(done, 0)
    assert set(param_slots(done)) == set(params.keys())
    X = np.random.default_rng(0).normal(size=(10, 3))
    probs = evaluate(done, params, X)
    assert probs.shape == (10, 2)
    loss, grad = gradient(done, params, (X, np.arange(10) % 2))
    assert np.isfinite(loss) and grad.keys() == params.keys()


def test_sequence_completion_uses_recurrent_block():
    g = build_grammar(toy_library(), 2, 2, GrammarOptions(task="sequence", seq_len=5))
    done = complete_with_neural(g.empty_architecture(), width=3)
    assert done.root.kind == "lstm"
    probs = evaluate(done, init_params(done, 0), np.zeros((4, 5, 2)))
    assert probs.shape == (4, 2)


def test_training_recovers_threshold_rule():
    g = search_grammar(2)
    arch = parse_program("Map(Affine(A))", g)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    y = (X[:, 0] > 0.3).astype(int)
    cfg = DiffConfig(lr_symbolic=0.1, epochs_symbolic=40, batches_per_epoch=4)
    res = train_params(arch, X, y, cfg)
    pred = evaluate(arch, res.params, X).argmax(1)
    assert (pred == y).mean() > 0.95
    a, b = res.params[(0,)]
    assert -b / a == pytest.approx(0.3, abs=0.1)
    # deterministic given the seed
    assert train_params(arch, X, y, cfg).params.allclose(res.params, atol=0)


def test_training_rejects_bad_labels():
    g = search_grammar(2)
    arch = parse_program("Map(Affine(A))", g)
    with pytest.raises(ValueError):
        train_params(arch, np.zeros((3, 3)), np.array([0, 1, 2]))
    with pytest.raises(ShapeMismatch):
        evaluate(arch, init_params(arch), np.zeros((3, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        DiffConfig(beta=0)
    with pytest.raises(ValueError):
        DiffConfig(completion_width=0)
    with pytest.raises(ValueError):
        DiffConfig(batches_per_epoch=0)
