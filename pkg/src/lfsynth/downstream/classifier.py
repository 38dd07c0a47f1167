"""Downstream behavior classifiers with optional weak-label skip connections."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..diffexec import DivergedTraining, split_train_val

torch.set_num_threads(1)


@dataclass(frozen=True)
class DownstreamConfig:
    architecture: str = "feedforward"  # or "recurrent"
    hidden: tuple[int, ...] = (128, 64, 32)
    dropout: tuple[float, ...] = (0.5, 0.4, 0.3)
    lr: float = 1e-4
    skip_weak_labels: bool = False
    epochs: int = 100
    seed: int = 0
    batch_size: int = 64
    val_fraction: float = 0.1
    # recurrent settings
    lstm_layers: int = 2
    lstm_hidden: int = 128
    lstm_dropout: float = 0.2
    warm_start: bool = False

    def __post_init__(self):
        if self.architecture not in ("feedforward", "recurrent"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if len(self.hidden) != len(self.dropout):
            raise ValueError("hidden and dropout need the same length")
        if self.lr <= 0 or self.epochs < 0:
            raise ValueError("lr must be positive and epochs non-negative")


DOWNSTREAM_PRESETS = {
    "feedforward": DownstreamConfig(),
    "recurrent": DownstreamConfig(architecture="recurrent", hidden=(128, 48), dropout=(0.3, 0.2), lr=3e-4),
    # small labeled sets need more passes and a larger step to converge in minutes
    "synthetic": DownstreamConfig(lr=1e-3, epochs=60, batch_size=32),
    "synthetic_recurrent": DownstreamConfig(architecture="recurrent", hidden=(128, 48), dropout=(0.3, 0.2),
                                            lr=1e-3, epochs=30, batch_size=32, lstm_layers=1, lstm_hidden=64),
}


class SkipMLP(nn.Module):
    """Feedforward net; ``extra`` (weak labels) is concatenated onto every layer's input."""

    def __init__(self, in_dim, extra_dim, hidden, dropout, out_dim):
        super().__init__()
        dims = [in_dim, *hidden]
        self.layers = nn.ModuleList(nn.Linear(d + extra_dim, h) for d, h in zip(dims[:-1], dims[1:]))
        self.drops = nn.ModuleList(nn.Dropout(p) for p in dropout)
        self.head = nn.Linear(dims[-1] + extra_dim, out_dim)
        self.extra_dim = extra_dim

    def forward(self, x, extra=None):
        h = x
        for lin, dp in zip(self.layers, self.drops):
            if self.extra_dim:
                h = torch.cat([h, extra], -1)
            h = dp(F.relu(lin(h)))
        if self.extra_dim:
            h = torch.cat([h, extra], -1)
        return self.head(h)


class RecurrentNet(nn.Module):
    def __init__(self, in_dim, extra_dim, lstm_hidden, lstm_layers, lstm_dropout, hidden, dropout, out_dim):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, lstm_hidden, lstm_layers, batch_first=True,
                            dropout=lstm_dropout if lstm_layers > 1 else 0.0)
        self.mlp = SkipMLP(lstm_hidden, extra_dim, hidden, dropout, out_dim)

    def forward(self, x, extra=None):
        out, _ = self.lstm(x)
        return self.mlp(out[:, -1], extra)


class Classifier:
    def __init__(self, net: nn.Module, mean, std, num_classes, uses_weak: bool, sequential: bool):
        self.net = net
        self.mean, self.std = mean, std
        self.num_classes = num_classes
        self.uses_weak = uses_weak
        self.sequential = sequential

    def _prep(self, X, weak):
        X = (np.asarray(X, dtype=np.float64) - self.mean) / self.std
        if not self.sequential and X.ndim == 3:
            X = X.reshape(len(X), -1)
        xt = torch.from_numpy(X).float()
        wt = None
        if self.uses_weak:
            if weak is None:
                raise ValueError("this classifier was trained with weak-label features")
            wt = torch.from_numpy(np.asarray(weak, dtype=np.float64)).float()
        return xt, wt

    def predict_proba(self, X, weak=None) -> np.ndarray:
        self.net.eval()
        xt, wt = self._prep(X, weak)
        with torch.no_grad():
            out = []
            for s in range(0, len(xt), 4096):
                out.append(torch.softmax(self.net(xt[s:s + 4096], None if wt is None else wt[s:s + 4096]), -1))
        return torch.cat(out).double().numpy()


def _soft_targets(labels, k):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        out = np.zeros((len(labels), k))
        out[np.arange(len(labels)), labels.astype(int)] = 1.0
        return out
    return labels.astype(np.float64)


def train_classifier(features, labels, weak_label_features=None, cfg: DownstreamConfig = DownstreamConfig(),
                     num_classes: int | None = None, init: Classifier | None = None,
                     class_weights=None) -> Classifier:
    """Soft-label cross entropy with Adam; returns the checkpoint with the lowest validation loss.

    ``labels`` may be class indices or per-row probability vectors (weak labels).
    With ``class_weights`` each row's loss is weighted by its expected class
    weight and the batch is normalised by the total weight.
    """
    X = np.asarray(features, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("no training rows")
    labels = np.asarray(labels)
    k = num_classes or (labels.shape[1] if labels.ndim == 2 else int(labels.max()) + 1)
    T = _soft_targets(labels, k)
    uses_weak = cfg.skip_weak_labels and weak_label_features is not None
    W = np.asarray(weak_label_features, dtype=np.float64) if uses_weak else None
    if W is not None and len(W) != len(X):
        raise ValueError("weak-label features are not row-aligned with the features")
    sequential = cfg.architecture == "recurrent" and X.ndim == 3
    flat = X.reshape(-1, X.shape[-1])
    mean, std = flat.mean(0), flat.std(0)
    std[std < 1e-8] = 1.0
    torch.manual_seed(cfg.seed)
    extra = W.shape[1] if uses_weak else 0
    if init is not None and cfg.warm_start:
        clf = copy.deepcopy(init)
        clf.mean, clf.std = mean, std
        net = clf.net
    else:
        if sequential:
            net = RecurrentNet(X.shape[-1], extra, cfg.lstm_hidden, cfg.lstm_layers, cfg.lstm_dropout,
                               cfg.hidden, cfg.dropout, k)
        else:
            in_dim = int(np.prod(X.shape[1:]))
            net = SkipMLP(in_dim, extra, cfg.hidden, cfg.dropout, k)
        clf = Classifier(net, mean, std, k, uses_weak, sequential)
    xt, wt = clf._prep(X, W)
    tt = torch.from_numpy(T).float()
    row_w = torch.ones(len(X))
    if class_weights is not None:
        row_w = torch.from_numpy(T @ np.asarray(class_weights, dtype=np.float64)).float()
    tr, va = split_train_val(len(X), cfg.val_fraction, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    def loss_on(idx):
        logits = net(xt[idx], None if wt is None else wt[idx])
        ce = -(tt[idx] * F.log_softmax(logits, -1)).sum(-1)
        w = row_w[idx]
        return (w * ce).sum() / w.sum()

    def val_loss():
        net.eval()
        with torch.no_grad():
            return float(loss_on(va))

    best = val_loss()
    best_state = copy.deepcopy(net.state_dict())
    bs = max(1, cfg.batch_size)
    for _ in range(cfg.epochs):
        net.train()
        order = tr[rng.permutation(len(tr))]
        for s in range(0, len(order), bs):
            b = order[s:s + bs]
            opt.zero_grad()
            loss = loss_on(b)
            if not torch.isfinite(loss):
                raise DivergedTraining("non-finite downstream loss")
            loss.backward()
            opt.step()
        v = val_loss()
        if not math.isfinite(v):
            raise DivergedTraining("non-finite downstream validation loss")
        if v < best:
            best = v
            best_state = copy.deepcopy(net.state_dict())
    net.load_state_dict(best_state)
    net.eval()
    return clf
