"""Differentiable execution and training of DSL programs.

Programs evaluate on a batch at once: a frame task takes an ``(N, F)`` matrix of
domain-LF values and yields one score per row, a sequence task takes
``(N, T, F)`` and folds over ``T``.  Every value is a tensor whose last axis is
the width of its SemType (1 for scalars).  torch (float64) provides the
gradients; the finite-difference check in the tests is the actual contract.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from .dsl import (
    Hole,
    Node,
    Operator,
    Path,
    ProgramArchitecture,
    SemType,
    path_str,
    to_text,
)

torch.set_num_threads(1)

STORE_FORMAT = 1


class DiffExecError(Exception):
    pass


class ShapeMismatch(DiffExecError):
    pass


class NonFiniteIntermediate(DiffExecError):
    pass


class NonFiniteGradient(DiffExecError):
    pass


class DivergedTraining(DiffExecError):
    pass


class UnsupportedHoleType(DiffExecError):
    pass


class IncompleteProgram(DiffExecError):
    pass


# --------------------------------------------------------------------------
# neural completions


@dataclass(frozen=True)
class NeuralCompletion:
    """Trainable stand-in for a hole.

    ``kind`` is ``mlp`` (one ReLU layer, applied per frame when the hole maps a
    sequence to a sequence) or ``lstm`` (single recurrent layer + linear head for
    holes that consume a whole sequence).
    """

    input_type: SemType
    output_type: SemType
    width: int
    kind: str
    in_dim: int
    out_dim: int
    symbol: str = "??"

    @property
    def num_params(self) -> int:
        w, i, o = self.width, self.in_dim, self.out_dim
        if self.kind == "mlp":
            return i * w + w + w * o + o
        return 4 * w * (i + w) + 4 * w + w * o + o

    @property
    def fan_ins(self) -> list[tuple[int, int]]:
        """(size, fan_in) of each weight block in flat order."""
        w, i, o = self.width, self.in_dim, self.out_dim
        if self.kind == "mlp":
            return [(i * w, i), (w, i), (w * o, w), (o, w)]
        return [(4 * w * i, w), (4 * w * w, w), (4 * w, w), (w * o, w), (o, w)]


def _flat_width(t: SemType) -> int:
    if t.kind == "sequence":
        raise UnsupportedHoleType(f"no flat width for {t}")
    return t.width


def neural_completion_block(hole_type_in: SemType, hole_type_out: SemType, width: int = 32) -> NeuralCompletion:
    if width < 1:
        raise ValueError("completion width must be >= 1")
    if hole_type_in.kind != "sequence" and hole_type_out.kind != "sequence":
        return NeuralCompletion(hole_type_in, hole_type_out, width, "mlp",
                                _flat_width(hole_type_in), _flat_width(hole_type_out))
    if hole_type_in.kind == "sequence" and hole_type_out.kind == "sequence":
        el_in, el_out = hole_type_in.element, hole_type_out.element
        if el_in.kind == "sequence" or el_out.kind == "sequence":
            raise UnsupportedHoleType(f"{hole_type_in} -> {hole_type_out}")
        return NeuralCompletion(hole_type_in, hole_type_out, width, "mlp",
                                el_in.width, el_out.width)
    if hole_type_in.kind == "sequence" and hole_type_in.element.kind != "sequence":
        return NeuralCompletion(hole_type_in, hole_type_out, width, "lstm",
                                hole_type_in.element.width, _flat_width(hole_type_out))
    raise UnsupportedHoleType(f"{hole_type_in} -> {hole_type_out}")


def complete_with_neural(arch: ProgramArchitecture, width: int = 32) -> ProgramArchitecture:
    """Replace every hole by a neural completion of matching signature."""
    return arch.map_unknowns(
        lambda path, h: neural_completion_block(h.input_type, h.expected_type, width)
        if isinstance(h, Hole) else h)


def has_completions(arch: ProgramArchitecture) -> bool:
    return any(isinstance(t, NeuralCompletion) for _, t in arch.walk())


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Mapping from node path to a float64 array shaped like the node's parameters."""

    def __init__(self, slots: dict[Path, np.ndarray] | None = None):
        self.slots: dict[Path, np.ndarray] = {}
        for k, v in (slots or {}).items():
            self[k] = v

    def __getitem__(self, path: Path) -> np.ndarray:
        return self.slots[path]

    def __setitem__(self, path: Path, value):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"non-finite parameters at {path_str(path)}")
        self.slots[tuple(path)] = value

    def __contains__(self, path):
        return tuple(path) in self.slots

    def __len__(self):
        return len(self.slots)

    def keys(self):
        return sorted(self.slots)

    def items(self):
        return [(k, self.slots[k]) for k in self.keys()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.slots.values()))

    def copy(self) -> ParameterStore:
        return ParameterStore({k: v.copy() for k, v in self.slots.items()})

    def flatten(self) -> np.ndarray:
        if not self.slots:
            return np.zeros(0)
        return np.concatenate([v.ravel() for _, v in self.items()])

    def unflatten(self, flat: np.ndarray) -> ParameterStore:
        out, i = {}, 0
        for k, v in self.items():
            out[k] = np.asarray(flat[i:i + v.size]).reshape(v.shape)
            i += v.size
        if i != len(flat):
            raise ShapeMismatch(f"expected {i} values, got {len(flat)}")
        return ParameterStore(out)

    def allclose(self, other: ParameterStore, **kw) -> bool:
        return self.keys() == other.keys() and all(np.allclose(self[k], other[k], **kw) for k in self.keys())

    def to_dict(self) -> dict:
        return {
            "format": STORE_FORMAT,
            "slots": {path_str(k): {"shape": list(v.shape), "values": v.ravel().tolist()}
                      for k, v in self.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParameterStore:
        if d.get("format") != STORE_FORMAT:
            raise ValueError(f"unsupported parameter store format {d.get('format')!r}")
        slots = {}
        for key, v in d["slots"].items():
            parts = key.split(".")
            if parts[0] != "r":
                raise ValueError(f"bad path {key!r}")
            path = tuple(int(p) for p in parts[1:])
            slots[path] = np.array(v["values"], dtype=np.float64).reshape(v["shape"])
        return cls(slots)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> ParameterStore:
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"ParameterStore({len(self)} slots, {self.size} values)"


def param_slots(arch: ProgramArchitecture) -> dict[Path, tuple[int, ...]]:
    out = {}
    for path, t in arch.walk():
        if isinstance(t, Node) and t.production.param_shape:
            out[path] = t.production.param_shape
        elif isinstance(t, NeuralCompletion):
            out[path] = (t.num_params,)
    return out


def _parent_slot(arch: ProgramArchitecture, path: Path):
    if not path:
        return None, None
    return arch.get(path[:-1]), path[-1]


def init_params(arch: ProgramArchitecture, rng: np.random.Generator | int | None = 0) -> ParameterStore:
    """Initial parameters.

    Scalar affines start at the identity (a=1, b=0) except when they feed an ITE
    condition, where small random weights keep the gate soft.  Vector-input or
    multi-output affines and completion weights use uniform(-1/sqrt(fan_in), +).
    """
    rng = np.random.default_rng(rng)
    store = {}
    for path, t in arch.walk():
        if isinstance(t, NeuralCompletion):
            chunks = [rng.uniform(-1, 1, size) / math.sqrt(fan) for size, fan in t.fan_ins]
            store[path] = np.concatenate(chunks)
            continue
        if not isinstance(t, Node) or not t.production.param_shape:
            continue
        p = t.production
        shape = p.param_shape
        if p.operator is Operator.CONSTANT_C:
            store[path] = np.zeros(shape)
        elif p.operator is Operator.AFFINE:
            parent, slot = _parent_slot(arch, path)
            in_cond = isinstance(parent, Node) and parent.production.operator is Operator.ITE and slot == 0
            fan_in = shape[-1] - 1
            if in_cond:
                store[path] = rng.uniform(-0.1, 0.1, shape)
            elif len(shape) == 1 and fan_in == 1:
                store[path] = np.array([1.0, 0.0])
            else:
                w = rng.uniform(-1, 1, shape) / math.sqrt(fan_in)
                w[..., -1] = 0.0
                store[path] = w
        else:
            store[path] = rng.uniform(-1, 1, shape) / math.sqrt(max(shape[-1], 1))
    return ParameterStore(store)


# --------------------------------------------------------------------------
# evaluation


def diff_ite(cond, then_val, else_val, beta: float = 1.0):
    """Soft if-then-else: y * then + (1 - y) * else with y = sigmoid(beta * cond)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    y = expit(beta * np.asarray(cond, dtype=np.float64))
    then_val = np.asarray(then_val, dtype=np.float64)
    else_val = np.asarray(else_val, dtype=np.float64)
    if then_val.shape != else_val.shape:
        raise ShapeMismatch(f"{then_val.shape} vs {else_val.shape}")
    return y * then_val + (1.0 - y) * else_val


def hard_ite(cond, then_val, else_val):
    return np.where(np.asarray(cond) > 0, then_val, else_val)


def _torch_ite(cond, a, b, beta, hard):
    if hard:
        return torch.where(cond > 0, a, b)
    y = torch.sigmoid(beta * cond)
    return y * a + (1 - y) * b


def _lstm(x, flat, nc: NeuralCompletion):
    # x: (N, T, in)
    w, i, o = nc.width, nc.in_dim, nc.out_dim
    k = 0
    W_ih = flat[k:k + 4 * w * i].view(4 * w, i); k += 4 * w * i
    W_hh = flat[k:k + 4 * w * w].view(4 * w, w); k += 4 * w * w
    b = flat[k:k + 4 * w]; k += 4 * w
    W_o = flat[k:k + w * o].view(o, w); k += w * o
    b_o = flat[k:k + o]
    n, T = x.shape[0], x.shape[1]
    h = x.new_zeros(n, w)
    c = x.new_zeros(n, w)
    xs = x @ W_ih.T + b
    for t in range(T):
        g = xs[:, t] + h @ W_hh.T
        ig, fg, gg, og = g.chunk(4, dim=-1)
        c = torch.sigmoid(fg) * c + torch.sigmoid(ig) * torch.tanh(gg)
        h = torch.sigmoid(og) * torch.tanh(c)
    return h @ W_o.T + b_o


def _mlp(x, flat, nc: NeuralCompletion):
    w, i, o = nc.width, nc.in_dim, nc.out_dim
    k = 0
    W1 = flat[k:k + i * w].view(w, i); k += i * w
    b1 = flat[k:k + w]; k += w
    W2 = flat[k:k + w * o].view(o, w); k += w * o
    b2 = flat[k:k + o]
    return F.relu(x @ W1.T + b1) @ W2.T + b2


def compile_program(arch: ProgramArchitecture) -> Callable:
    """Build ``fn(X, params, beta, hard) -> raw scores`` for a complete (or neurally completed) architecture."""

    def build(t, path: Path):
        if isinstance(t, Hole):
            raise IncompleteProgram(f"hole at {path_str(path)}")
        if isinstance(t, NeuralCompletion):
            if t.kind == "lstm":
                return lambda X, P, beta, hard: _lstm(X, P[path], t)
            return lambda X, P, beta, hard: _mlp(X, P[path], t)
        p = t.production
        op = p.operator
        kids = [build(c, path + (i,)) for i, c in enumerate(t.children)]
        if op is Operator.DOMAIN_LF:
            lo, hi = p.lf.columns
            return lambda X, P, beta, hard: X[..., lo:hi]
        if op is Operator.INPUT_X:
            return lambda X, P, beta, hard: X
        if op is Operator.CONSTANT_C:
            return lambda X, P, beta, hard: P[path].expand(*X.shape[:-1], 1)
        if op is Operator.ADD:
            a, b = kids
            return lambda X, P, beta, hard: a(X, P, beta, hard) + b(X, P, beta, hard)
        if op is Operator.OUTER:
            a, b = kids

            def outer(X, P, beta, hard):
                u, v = a(X, P, beta, hard), b(X, P, beta, hard)
                if u.shape[-1] == 1 or v.shape[-1] == 1:
                    return u * v
                return (u[..., :, None] * v[..., None, :]).flatten(-2)
            return outer
        if op is Operator.DOT:
            a, b = kids
            return lambda X, P, beta, hard: (a(X, P, beta, hard) * b(X, P, beta, hard)).sum(-1, keepdim=True)
        if op is Operator.CONCAT:
            a, b = kids
            return lambda X, P, beta, hard: torch.cat([a(X, P, beta, hard), b(X, P, beta, hard)], -1)
        if op is Operator.ITE:
            c, a, b = kids
            return lambda X, P, beta, hard: _torch_ite(c(X, P, beta, hard), a(X, P, beta, hard),
                                                       b(X, P, beta, hard), beta, hard)
        if op is Operator.AFFINE:
            (a,) = kids
            if len(p.param_shape) == 1:
                def aff(X, P, beta, hard):
                    w = P[path]
                    return a(X, P, beta, hard) @ w[:-1, None] + w[-1]
            else:
                def aff(X, P, beta, hard):
                    w = P[path]
                    return a(X, P, beta, hard) @ w[:, :-1].T + w[:, -1]
            return aff
        if op is Operator.MAP:
            (body,) = kids
            return body
        if op is Operator.FOLD:
            (body,) = kids
            init = p.fold_init
            return lambda X, P, beta, hard: body(X, P, beta, hard).sum(-2) + init
        raise DiffExecError(f"operator {op} has no evaluator")

    return build(arch.root, ())


def output_classes(arch: ProgramArchitecture) -> int:
    root = arch.root
    out = root.production.output if isinstance(root, Node) else getattr(root, "output_type", None)
    if out is None and isinstance(root, Hole):
        out = root.expected_type
    if out.kind == "sequence":
        out = out.element
    return 2 if out.kind == "scalar" else out.dim


def scores_to_logits(scores: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Binary programs emit one logit for the positive class; prepend a zero for the negative."""
    if num_classes == 2 and scores.shape[-1] == 1:
        return torch.cat([torch.zeros_like(scores), scores], -1)
    return scores


def _to_tensors(params: ParameterStore, requires_grad=False) -> dict:
    return {k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad) for k, v in params.items()}


def _check_input(arch, X, params):
    slots = param_slots(arch)
    for k, shape in slots.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ShapeMismatch(f"parameter slot {path_str(k)} expects shape {shape}")
    X = np.asarray(X, dtype=np.float64)
    root = arch.root
    in_type = root.production.input if isinstance(root, Node) else root.input_type
    want_ndim = 3 if in_type.length is not None or (
        isinstance(root, Node) and root.production.operator is Operator.FOLD) or (
        isinstance(root, NeuralCompletion) and root.kind == "lstm") else 2
    if X.ndim == want_ndim - 1:
        X = X[None]
    if X.ndim != want_ndim:
        raise ShapeMismatch(f"expected a {want_ndim}-d input, got shape {X.shape}")
    frame = in_type.element
    if X.shape[-1] != frame.width:
        raise ShapeMismatch(f"expected {frame.width} features per frame, got {X.shape[-1]}")
    return X


def evaluate(arch: ProgramArchitecture, params: ParameterStore, X, beta: float = 1.0,
             hard: bool = False, raw: bool = False, fn: Callable | None = None) -> np.ndarray:
    """Class probabilities, one row per input example (or raw scores with ``raw=True``)."""
    X = _check_input(arch, X, params)
    fn = fn or compile_program(arch)
    with torch.no_grad():
        s = fn(torch.from_numpy(X), _to_tensors(params), beta, hard)
        if not torch.all(torch.isfinite(s)):
            raise NonFiniteIntermediate("program produced non-finite scores")
        if raw:
            return s.numpy().copy()
        k = output_classes(arch)
        return torch.softmax(scores_to_logits(s, k), -1).numpy().copy()


def weighted_ce(logits: torch.Tensor, y: torch.Tensor, class_weights: torch.Tensor | None) -> torch.Tensor:
    """Class-weighted cross entropy, normalised by the total weight of the batch."""
    return F.cross_entropy(logits, y, weight=class_weights)


def gradient(arch: ProgramArchitecture, params: ParameterStore, batch, loss: str = "weighted_cross_entropy",
             class_weights=None, beta: float = 1.0) -> tuple[float, ParameterStore]:
    if loss != "weighted_cross_entropy":
        raise ValueError(f"unknown loss {loss!r}")
    X, y = batch
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    X = _check_input(arch, X, params)
    k = output_classes(arch)
    cw = None
    if class_weights is not None:
        if len(class_weights) != k:
            raise ValueError(f"need {k} class weights, got {len(class_weights)}")
        cw = torch.tensor(class_weights, dtype=torch.float64)
    P = _to_tensors(params, requires_grad=True)
    fn = compile_program(arch)
    s = fn(torch.from_numpy(X), P, beta, False)
    val = weighted_ce(scores_to_logits(s, k), torch.from_numpy(y.astype(np.int64)), cw)
    keys = params.keys()
    grads = torch.autograd.grad(val, [P[key] for key in keys], allow_unused=True)
    out = {}
    for key, g in zip(keys, grads):
        g = np.zeros(params[key].shape) if g is None else g.numpy().copy()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient at {path_str(key)}")
        out[key] = g
    return float(val.detach()), ParameterStore(out)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DiffConfig:
    beta: float = 1.0
    lr_symbolic: float = 1e-3
    lr_completion: float = 1e-3
    epochs_symbolic: int = 15
    epochs_completion: int = 6
    class_weights: tuple[float, ...] | None = None  # None: inverse class frequency
    seed: int = 0
    batch_size: int = 64
    val_fraction: float = 0.1
    completion_width: int = 32
    batches_per_epoch: int | None = None  # overrides batch_size with ceil(n_train / batches_per_epoch)

    def __post_init__(self):
        if self.beta <= 0 or self.lr_symbolic <= 0 or self.lr_completion <= 0:
            raise ValueError("beta and learning rates must be positive")
        if self.epochs_symbolic < 0 or self.epochs_completion < 0:
            raise ValueError("epochs must be non-negative")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.completion_width < 1:
            raise ValueError("completion_width must be >= 1")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive")


DIFF_PRESETS = {
    "default": DiffConfig(),
    "basketball": DiffConfig(lr_symbolic=0.02, lr_completion=0.02, epochs_symbolic=6, epochs_completion=4),
    # desk-scale datasets are orders of magnitude smaller than the original corpora: a fixed
    # number of larger steps per epoch keeps training cost flat in n, and narrow
    # completions keep the cost-to-go estimate sensitive to the partial structure
    "synthetic": DiffConfig(lr_symbolic=0.1, lr_completion=0.05, epochs_symbolic=60, epochs_completion=30,
                            batches_per_epoch=4, completion_width=2),
}


def balanced_class_weights(y: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=num_classes).astype(float)
    w = np.ones(num_classes)
    present = counts > 0
    w[present] = len(y) / (present.sum() * counts[present])
    return w


def arch_seed(seed: int, arch: ProgramArchitecture) -> int:
    """Per-architecture seed so identical architectures always train identically."""
    h = hashlib.sha256(f"{seed}:{to_text(arch)}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n - n_val == 0:
        return np.sort(idx), np.sort(idx)
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


@dataclass
class TrainResult:
    params: ParameterStore
    cost: float
    val_loss: float
    history: list = field(default_factory=list)
    epochs: int = 0


def train_params(arch: ProgramArchitecture, X, y, config: DiffConfig = DiffConfig(),
                 params: ParameterStore | None = None,
                 cost_fn: Callable | None = None) -> TrainResult:
    """Adam on weighted cross entropy; keeps the epoch with the lowest validation loss.

    ``cost_fn(probs, y)`` scores the selected parameters on all given rows
    (defaults to the validation loss itself).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    k = output_classes(arch)
    if len(y) == 0:
        raise ValueError("no training data")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must be in [0, {k})")
    completing = has_completions(arch)
    epochs = config.epochs_completion if completing else config.epochs_symbolic
    lr = config.lr_completion if completing else config.lr_symbolic
    s = arch_seed(config.seed, arch)
    rng = np.random.default_rng(s)
    if params is None:
        params = init_params(arch, rng)
    X = _check_input(arch, X, params)
    tr, va = split_train_val(len(y), config.val_fraction, config.seed)
    cw = np.asarray(config.class_weights if config.class_weights is not None
                    else balanced_class_weights(y[tr], k), dtype=np.float64)
    if len(cw) != k:
        raise ValueError(f"need {k} class weights, got {len(cw)}")
    cw_t = torch.from_numpy(cw)
    fn = compile_program(arch)
    keys = params.keys()
    P = _to_tensors(params, requires_grad=True)
    Xt, yt = torch.from_numpy(X), torch.from_numpy(y)
    opt = torch.optim.Adam([P[key] for key in keys], lr=lr) if keys else None

    def val_loss():
        with torch.no_grad():
            logits = scores_to_logits(fn(Xt[va], P, config.beta, False), k)
            return float(weighted_ce(logits, yt[va], cw_t))

    best = val_loss()
    if not math.isfinite(best):
        raise DivergedTraining("non-finite loss at initialization")
    best_params = params.copy()
    history = [best]
    bs = config.batch_size if config.batch_size > 0 else len(tr)
    if config.batches_per_epoch is not None:
        bs = max(1, math.ceil(len(tr) / config.batches_per_epoch))
    for _ in range(epochs if keys else 0):
        order = tr[rng.permutation(len(tr))]
        for start in range(0, len(order), bs):
            b = order[start:start + bs]
            opt.zero_grad()
            loss = weighted_ce(scores_to_logits(fn(Xt[b], P, config.beta, False), k), yt[b], cw_t)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite loss while training {to_text(arch)}")
            loss.backward()
            opt.step()
        v = val_loss()
        if not math.isfinite(v):
            raise DivergedTraining(f"non-finite validation loss while training {to_text(arch)}")
        history.append(v)
        if v < best:
            best = v
            best_params = ParameterStore({key: P[key].detach().numpy().copy() for key in keys})
    cost = best
    if cost_fn is not None:
        probs = evaluate(arch, best_params, X, beta=config.beta, fn=fn)
        cost = float(cost_fn(probs, y))
    return TrainResult(best_params, cost, best, history, epochs if keys else 0)
