"""Synthetic multi-agent trajectories with planted behavior rules.

Each world draws a schedule of behavior segments with exact target frame
counts, generates the key kinematic variables of every segment inside a region
that satisfies exactly one rule, integrates them into agent positions, jitters
the keypoints, and finally labels every frame by running the priority-ordered
rules on the computed domain-LF values (plus a small amount of label noise).
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsl import DomainLFLibrary, Grammar, GrammarOptions, build_grammar


class SynthDataError(Exception):
    pass


class InfeasibleMix(SynthDataError):
    pass


class MissingChannel(SynthDataError):
    def __init__(self, name):
        super().__init__(f"raw state is missing channel {name!r}")
        self.name = name


FLY_MIX = {
    "lunge": 0.0124,
    "wing_threat": 0.0426,
    "tussle": 0.0035,
    "wing_extension": 0.0331,
    "circle": 0.0080,
    "copulation": 0.5973,
}
MOUSE_MIX = {"attack": 0.0344, "investigation": 0.2756, "mount": 0.0745}
BASKETBALL_MIX = {"player_0": 0.1850, "player_1": 0.2209, "player_2": 0.2287, "player_3": 0.1818,
                  "player_4": 0.1836}
BENCHMARK_MIX = {"lunge": 0.20}

DEFAULT_MIX = {"fly_like": FLY_MIX, "mouse_like": MOUSE_MIX, "basketball_like": BASKETBALL_MIX,
               "benchmark": BENCHMARK_MIX}
CLASSES = {
    "fly_like": ["none", "lunge", "wing_threat", "tussle", "wing_extension", "circle", "copulation"],
    "mouse_like": ["other", "attack", "investigation", "mount"],
    "basketball_like": list(BASKETBALL_MIX),
    "benchmark": ["none", "lunge"],
}
WINDOW = 20


@dataclass(frozen=True)
class WorldConfig:
    domain: str = "fly_like"
    num_agents: int = 2
    arena: tuple[float, float] = (100.0, 100.0)
    frame_rate: float = 30.0
    num_frames: int = 50000
    num_sequences: int = 2000
    seq_len: int = 25
    behavior_mix: dict | None = None  # None: domain default
    segment_frames: tuple[int, int] = (8, 40)
    jitter: float = 0.02
    label_noise: float = 0.02
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    @property
    def mix(self) -> dict:
        return dict(DEFAULT_MIX[self.domain] if self.behavior_mix is None else self.behavior_mix)

    @property
    def classes(self) -> list[str]:
        return CLASSES[self.domain]


@dataclass
class TrajectoryDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_lf_values: np.ndarray
    splits: dict[str, np.ndarray]
    library: DomainLFLibrary
    classes: list[str]
    domain: str
    planted: dict = field(default_factory=dict)
    feature_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def is_sequential(self) -> bool:
        return self.domain_lf_values.ndim == 3

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.splits[name]
        return self.domain_lf_values[m], self.labels[m]

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.splits[name])

    def prevalence(self) -> dict[str, float]:
        counts = np.bincount(self.labels, minlength=self.num_classes) / len(self.labels)
        return {c: float(p) for c, p in zip(self.classes, counts)}

    def sha256(self) -> str:
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.domain_lf_values):
            h.update(np.ascontiguousarray(a).tobytes())
        for k in sorted(self.splits):
            h.update(k.encode())
            h.update(self.splits[k].tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# helpers


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _allocate(mix: dict, classes: list[str], n: int) -> dict[str, int]:
    for name, p in mix.items():
        if name not in classes:
            raise InfeasibleMix(f"unknown behavior {name!r}; expected one of {classes[1:]}")
        if not 0 <= p <= 1:
            raise InfeasibleMix(f"prevalence of {name!r} must be in [0, 1]")
    total = sum(mix.values())
    if total > 1 + 1e-9:
        raise InfeasibleMix(f"behavior prevalences sum to {total:.4f} > 1")
    counts = {name: int(round(p * n)) for name, p in mix.items()}
    # a mix summing to one can overshoot after rounding: trim the largest round-ups first
    over = sum(counts.values()) - n
    for name in sorted(mix, key=lambda c: mix[c] * n - counts[c])[:max(over, 0)]:
        counts[name] -= 1
    for name, p in mix.items():
        if p > 0 and counts[name] == 0:
            raise InfeasibleMix(f"{name!r} at prevalence {p} needs more than {n} frames")
    rest = n - sum(counts.values())
    counts[classes[0]] = counts.get(classes[0], 0) + rest
    return counts


def _segments(counts: dict[str, int], regions: dict, seg: tuple[int, int], rng) -> list[tuple[str, int, int]]:
    """Split each behavior's frame budget into segments and shuffle them.

    Returns (behavior, region index, length) triples.
    """
    out = []
    for name, total in counts.items():
        left = total
        nreg = len(regions[name])
        while left > 0:
            ln = int(min(left, rng.integers(seg[0], seg[1] + 1)))
            out.append((name, int(rng.integers(nreg)), ln))
            left -= ln
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def _ramp(lo, hi, n, rng):
    a, b = rng.uniform(lo, hi, 2)
    return np.linspace(a, b, n)


def _count_preserving_noise(labels, frac, rng):
    labels = labels.copy()
    k = int(round(frac * len(labels)))
    if k > 1:
        idx = rng.choice(len(labels), k, replace=False)
        labels[idx] = labels[rng.permutation(idx)]
    return labels


def _split_masks(n, fractions, rng) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    out = {}
    for name, idx in (("train", perm[:a]), ("val", perm[a:b]), ("test", perm[b:])):
        m = np.zeros(n, dtype=bool)
        m[idx] = True
        out[name] = m
    return out


def _rolling(x, w, fn):
    """Trailing window reduction over axis 0; early frames repeat the first value."""
    pad = np.concatenate([np.repeat(x[:1], w - 1, axis=0), x], 0)
    view = np.lib.stride_tricks.sliding_window_view(pad, w, axis=0)
    return fn(view, axis=-1)


# --------------------------------------------------------------------------
# fly-like worlds

# key-variable regions: speed s, distance d, facing f (fraction of pi), |turn rate| w, wingspan ws
_LOW_WS, _LOW_W = (0.2, 0.7), (0.0, 0.12)
FLY_REGIONS = {
    "tussle": [dict(s=(3, 6), d=(1, 2), f=(0, 1), w=_LOW_W, ws=_LOW_WS)],
    "copulation": [dict(s=(0, 0.8), d=(0.5, 2), f=(0, 1), w=_LOW_W, ws=_LOW_WS)],
    "lunge": [dict(s=(6, 10), d=(2.5, 6), f=(0, 0.25), w=_LOW_W, ws=_LOW_WS)],
    "wing_threat": [dict(s=(0, 4), d=(3, 12), f=(0, 1), w=_LOW_W, ws=(1.7, 2.4))],
    "wing_extension": [dict(s=(0, 4), d=(3, 12), f=(0, 1), w=_LOW_W, ws=(0.95, 1.5))],
    "circle": [dict(s=(1, 4), d=(3, 6.5), f=(0, 1), w=(0.25, 0.45), ws=_LOW_WS)],
    "none": [
        dict(s=(5.5, 9), d=(8, 15), f=(0, 1), w=_LOW_W, ws=_LOW_WS),
        dict(s=(0, 2), d=(2.5, 6), f=(0, 1), w=_LOW_W, ws=_LOW_WS),
        dict(s=(0, 3), d=(8, 15), f=(0, 1), w=_LOW_W, ws=_LOW_WS),
        dict(s=(6, 9), d=(3, 6), f=(0.5, 1), w=_LOW_W, ws=_LOW_WS),
    ],
}
# benchmark: a facing-conditioned rule with no margin between classes, so neither a single
# linear cut nor per-feature thresholds recover it
BENCH_REGIONS = {
    "lunge": [dict(s=(5, 10), d=(1, 15), f=(0, 0.4), w=_LOW_W, ws=_LOW_WS),
              dict(s=(0, 10), d=(0.5, 3), f=(0.4, 1), w=_LOW_W, ws=_LOW_WS)],
    "none": [
        dict(s=(0, 5), d=(1, 15), f=(0, 0.4), w=_LOW_W, ws=_LOW_WS),
        dict(s=(0, 10), d=(3, 15), f=(0.4, 1), w=_LOW_W, ws=_LOW_WS),
    ],
}


def fly_rules(lf: dict[str, np.ndarray], classes: list[str]) -> np.ndarray:
    """Priority-ordered fly behavior rules over domain-LF columns."""
    s, d, f = lf["Speed"], lf["FlyDistance"], lf["FacingAngle"]
    w, ws = lf["AngVel"], lf["Wingspan"]
    rules = [
        ("tussle", (d < 2.2) & (s > 2.5)),
        ("copulation", (d < 2.2) & (s < 1)),
        ("lunge", (s > 5) & (f < 0.35) & (d < 7)),
        ("wing_threat", ws > 1.6),
        ("wing_extension", ws > 0.86),
        ("circle", (w ** 2 > 0.04) & (d < 7)),
    ]
    return _apply_rules(rules, classes, len(s))


def benchmark_rules(lf: dict[str, np.ndarray], classes: list[str]) -> np.ndarray:
    s, d, f = lf["Speed"], lf["FlyDistance"], lf["FacingAngle"]
    hit = np.where(f < 0.4, s > 5, d < 3)
    return _apply_rules([("lunge", hit)], classes, len(s))


def _apply_rules(rules, classes, n):
    out = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for name, hit in rules:
        if name not in classes:
            continue
        sel = hit & ~done
        out[sel] = classes.index(name)
        done |= sel
    return out


def _simulate_fly(cfg: WorldConfig, regions: dict, rng) -> dict[str, np.ndarray]:
    classes = cfg.classes
    counts = _allocate(cfg.mix, classes, cfg.num_frames)
    segs = _segments(counts, {c: regions.get(c, regions["none"]) for c in counts}, cfg.segment_frames, rng)
    n = cfg.num_frames
    s, d, f, w, ws = (np.empty(n) for _ in range(5))
    side = np.empty(n)
    t = 0
    for name, r, ln in segs:
        reg = regions[name][r]
        sl = slice(t, t + ln)
        s[sl] = _ramp(*reg["s"], ln, rng)
        d[sl] = _ramp(*reg["d"], ln, rng)
        f[sl] = _ramp(*reg["f"], ln, rng)
        w[sl] = _ramp(*reg["w"], ln, rng) * rng.choice([-1, 1])
        ws[sl] = _ramp(*reg["ws"], ln, rng)
        side[sl] = rng.choice([-1, 1])
        t += ln

    # agent 0 (actor): integrate heading and speed
    theta0 = np.cumsum(w) + rng.uniform(-np.pi, np.pi)
    step = s[:, None] * np.stack([np.cos(theta0), np.sin(theta0)], 1)
    step[0] = 0
    p0 = np.cumsum(step, 0) + np.array(cfg.arena) / 2
    # agent 1 placed relative to the actor's heading
    phi = theta0 + side * np.pi * f
    p1 = p0 + d[:, None] * np.stack([np.cos(phi), np.sin(phi)], 1)
    theta1 = np.arctan2(p0[:, 1] - p1[:, 1], p0[:, 0] - p1[:, 0]) + rng.normal(0, 0.3, n)

    left0 = ws / 2 + rng.normal(0, 0.05, n)
    wings = np.stack([np.stack([left0, ws - left0], 1),
                      np.abs(rng.normal(0.22, 0.08, (n, 2)))], 1)  # (n, agent, side)
    major = np.stack([2.5 + 0.1 * np.sin(np.arange(n) / 50), 2.4 + rng.normal(0, 0.05, n)], 1)
    minor = np.stack([np.full(n, 1.0), np.full(n, 0.95)], 1) + rng.normal(0, 0.02, (n, 2))

    j = cfg.jitter
    pos = np.stack([p0, p1], 1) + rng.normal(0, j, (n, 2, 2))
    heading = np.stack([theta0, theta1], 1) + rng.normal(0, j, (n, 2))
    wings = wings + rng.normal(0, j, wings.shape)
    return {"position": pos, "heading": heading, "wing_angle": wings, "body_major": major, "body_minor": minor}


def _speed_vel(pos):
    v = np.diff(pos, axis=0, prepend=pos[:1])
    v[0] = v[1] if len(v) > 1 else 0
    return v


def _fly_lfs(raw: dict, compact: bool) -> tuple[np.ndarray, list[tuple[str, int, str]]]:
    for ch in ("position", "heading", "wing_angle", "body_major", "body_minor"):
        if ch not in raw:
            raise MissingChannel(ch)
    pos, heading = raw["position"], raw["heading"]
    vel = _speed_vel(pos)  # (n, 2, 2)
    speed = np.linalg.norm(vel, axis=-1)
    angvel = _wrap(np.diff(heading, axis=0, prepend=heading[:1]))
    rel = pos[:, 1] - pos[:, 0]
    dist = np.linalg.norm(rel, axis=-1)
    bearing = np.arctan2(rel[:, 1], rel[:, 0])
    facing0 = np.abs(_wrap(bearing - heading[:, 0])) / np.pi
    facing1 = np.abs(_wrap(bearing + np.pi - heading[:, 1])) / np.pi

    def body_frame(v, th):
        c, s_ = np.cos(th), np.sin(th)
        return np.stack([c * v[:, 0] + s_ * v[:, 1], -s_ * v[:, 0] + c * v[:, 1]], 1)

    wings = raw["wing_angle"]
    wing_max = wings.max(-1)
    wingspan = wings.sum(-1)
    max_win = _rolling(wing_max, WINDOW, np.max)
    min_win = _rolling(wing_max, WINDOW, np.min)
    ratio = raw["body_major"] / raw["body_minor"]
    wing_ratio = wingspan[:, 0] / (2 * raw["body_major"][:, 0])
    cols = {
        "Speed": (speed[:, 0], "linear"),
        "OtherSpeed": (speed[:, 1], "linear"),
        "FlyDistance": (dist, "positional"),
        "FacingAngle": (facing0, "angular"),
        "AngVel": (angvel[:, 0], "angular"),
        "BodyRatio": (ratio[:, 0], "ratio"),
        "MaxWingAngle": (max_win[:, 0], "wing"),
        "Wingspan": (wingspan[:, 0], "wing"),
    }
    if not compact:
        cols.update({
            "Velocity": (body_frame(vel[:, 0], heading[:, 0]), "linear"),
            "OtherVelocity": (body_frame(vel[:, 1], heading[:, 1]), "linear"),
            "RelVelocity": (body_frame(vel[:, 1] - vel[:, 0], heading[:, 0]), "linear"),
            "OtherFacingAngle": (facing1, "angular"),
            "OtherAngVel": (angvel[:, 1], "angular"),
            "OtherBodyRatio": (ratio[:, 1], "ratio"),
            "WingRatio": (wing_ratio, "ratio"),
            "MinWingAngle": (min_win[:, 0], "wing"),
            "OtherMaxWingAngle": (max_win[:, 1], "wing"),
            "OtherMinWingAngle": (min_win[:, 1], "wing"),
            "OtherWingspan": (wingspan[:, 1], "wing"),
        })
    return _stack(cols)


def _stack(cols):
    mats, specs = [], []
    for name, (v, cat) in cols.items():
        v = np.asarray(v, dtype=np.float64)
        v = v.reshape(v.shape[0], -1) if v.ndim <= 2 else v.reshape(*v.shape[:2], -1)
        mats.append(v)
        specs.append((name, v.shape[-1], cat))
    return np.concatenate(mats, -1), specs


# --------------------------------------------------------------------------
# mouse-like world

MOUSE_REGIONS = {
    "attack": [dict(s=(5, 9), d=(1, 2.5), f=(0, 1), w=(0.0, 0.3))],
    "mount": [dict(s=(0, 1.5), d=(0.3, 1.2), f=(0, 1), w=(0.0, 0.1))],
    "investigation": [dict(s=(0, 3.5), d=(1.5, 5), f=(0, 0.3), w=(0.0, 0.2))],
    "other": [dict(s=(0, 6), d=(6, 20), f=(0, 1), w=(0.0, 0.2)),
              dict(s=(0, 3.5), d=(1.5, 5), f=(0.5, 1), w=(0.0, 0.2))],
}


def mouse_rules(lf: dict[str, np.ndarray], classes) -> np.ndarray:
    d, s, f = lf["MouseDistance"], lf["MouseSpeed"][:, 0], lf["MouseFacing"][:, 0]
    return _apply_rules([
        ("attack", (d < 3) & (s > 4.5)),
        ("mount", (d < 1.3) & (s < 2)),
        ("investigation", (d < 5.5) & (s < 4) & (f < 0.4)),
    ], classes, len(d))


def _simulate_mouse(cfg: WorldConfig, rng):
    classes = cfg.classes
    counts = _allocate(cfg.mix, classes, cfg.num_frames)
    segs = _segments(counts, MOUSE_REGIONS, cfg.segment_frames, rng)
    n = cfg.num_frames
    s, d, f, w, side = (np.empty(n) for _ in range(5))
    t = 0
    for name, r, ln in segs:
        reg = MOUSE_REGIONS[name][r]
        sl = slice(t, t + ln)
        s[sl] = _ramp(*reg["s"], ln, rng)
        d[sl] = _ramp(*reg["d"], ln, rng)
        f[sl] = _ramp(*reg["f"], ln, rng)
        w[sl] = _ramp(*reg["w"], ln, rng) * rng.choice([-1, 1])
        side[sl] = rng.choice([-1, 1])
        t += ln
    theta0 = np.cumsum(w) + rng.uniform(-np.pi, np.pi)
    step = s[:, None] * np.stack([np.cos(theta0), np.sin(theta0)], 1)
    step[0] = 0
    p0 = np.cumsum(step, 0)
    phi = theta0 + side * np.pi * f
    p1 = p0 + d[:, None] * np.stack([np.cos(phi), np.sin(phi)], 1)
    theta1 = phi + np.pi + np.cumsum(rng.normal(0, 0.05, n))
    major = np.stack([np.full(n, 3.0), np.full(n, 2.8)], 1) + rng.normal(0, 0.05, (n, 2))
    minor = np.stack([np.full(n, 1.5), np.full(n, 1.4)], 1) + rng.normal(0, 0.03, (n, 2))
    j = cfg.jitter
    return {"position": np.stack([p0, p1], 1) + rng.normal(0, j, (n, 2, 2)),
            "heading": np.stack([theta0, theta1], 1) + rng.normal(0, j, (n, 2)),
            "body_major": major, "body_minor": minor}


def _mouse_lfs(raw: dict):
    for ch in ("position", "heading", "body_major", "body_minor"):
        if ch not in raw:
            raise MissingChannel(ch)
    pos, heading = raw["position"], raw["heading"]
    vel = _speed_vel(pos)
    acc = _speed_vel(vel)
    speed = np.linalg.norm(vel, axis=-1)
    angvel = _wrap(np.diff(heading, axis=0, prepend=heading[:1]))
    rel = pos[:, 1] - pos[:, 0]
    dist = np.linalg.norm(rel, axis=-1)
    bearing = np.arctan2(rel[:, 1], rel[:, 0])
    facing = np.stack([np.abs(_wrap(bearing - heading[:, 0])),
                       np.abs(_wrap(bearing + np.pi - heading[:, 1]))], 1) / np.pi
    nose0 = pos[:, 0] + raw["body_major"][:, :1] / 2 * np.stack([np.cos(heading[:, 0]), np.sin(heading[:, 0])], 1)
    c, s_ = np.cos(heading[:, 0]), np.sin(heading[:, 0])
    rel_body = np.stack([c * rel[:, 0] + s_ * rel[:, 1], -s_ * rel[:, 0] + c * rel[:, 1]], 1)
    cols = {
        "MouseDistance": (dist, "positional"),
        "NoseDistance": (np.linalg.norm(pos[:, 1] - nose0, axis=-1), "positional"),
        "RelativePosition": (rel_body, "positional"),
        "MouseSpeed": (speed, "speed"),
        "MouseVelocity": (np.concatenate([_rot(vel[:, 0], heading[:, 0]), _rot(vel[:, 1], heading[:, 1])], 1),
                          "speed"),
        "MouseAcceleration": (np.linalg.norm(acc, axis=-1), "speed"),
        "MouseAngular": (angvel, "angular"),
        "MouseFacing": (facing, "angular"),
        "MouseAxisRatio": (raw["body_major"] / raw["body_minor"], "shape"),
        "MouseArea": (np.pi * raw["body_major"] * raw["body_minor"] / 4, "shape"),
    }
    return _stack(cols)


def _rot(v, th):
    c, s = np.cos(th), np.sin(th)
    return np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], 1)


# --------------------------------------------------------------------------
# basketball-like world (sequences)


def _simulate_basketball(cfg: WorldConfig, rng):
    classes = cfg.classes
    counts = _allocate(cfg.mix, classes, cfg.num_sequences)
    handler = np.concatenate([np.full(c, classes.index(k)) for k, c in counts.items()])
    handler = handler[rng.permutation(len(handler))]
    n, T = cfg.num_sequences, cfg.seq_len
    offense = np.empty((n, T, 5, 2))
    defense = np.empty((n, T, 5, 2))
    ball = np.empty((n, T, 2))
    holder = np.empty((n, T), dtype=np.int64)
    for i in range(n):
        start = rng.uniform([10, 5], [40, 45], (5, 2))
        steps = rng.normal(0, 0.8, (T, 5, 2))
        steps[0] = 0
        offense[i] = start + np.cumsum(steps, 0)
        # the ball starts with another player on some possessions and is passed to the handler
        h = handler[i]
        hold = np.full(T, h)
        if rng.random() < 0.4:
            other = (h + rng.integers(1, 5)) % 5
            hold[: int(rng.integers(1, T // 2 - 1))] = other
        holder[i] = hold
        ball[i] = offense[i, np.arange(T), hold] + rng.normal(0, 0.3, (T, 2))
        toward = np.array([0.0, 25.0]) - offense[i]
        toward /= np.linalg.norm(toward, axis=-1, keepdims=True) + 1e-9
        gap = rng.uniform(1.5, 3.0, (1, 5, 1))
        shake = rng.normal(0, 0.25, (T, 5, 2))
        on_ball = hold[:, None] == np.arange(5)[None]
        shake[on_ball] = rng.normal(0, 1.6, (on_ball.sum(), 2))
        defense[i] = offense[i] + gap * toward + shake
    j = cfg.jitter
    return {"offense": offense + rng.normal(0, j, offense.shape),
            "defense": defense + rng.normal(0, j, defense.shape),
            "ball": ball + rng.normal(0, j, ball.shape)}, handler


def _seq_diff(x):
    v = np.diff(x, axis=1, prepend=x[:, :1])
    v[:, 0] = v[:, 1]
    return v


def _basketball_lfs(raw: dict):
    for ch in ("defense", "ball"):
        if ch not in raw:
            raise MissingChannel(ch)
    dfn, ball = raw["defense"], raw["ball"]
    n, T = dfn.shape[:2]
    dvel = _seq_diff(dfn)
    dacc = _seq_diff(dvel)
    bvel = _seq_diff(ball)
    bacc = _seq_diff(bvel)
    centred = dfn - dfn.mean(2, keepdims=True)
    cols = {
        "BallVelocity": (bvel, "ball"),
        "BallAcceleration": (bacc, "ball"),
        "BallSpeed": (np.linalg.norm(bvel, axis=-1)[..., None], "ball"),
        "PlayerVelocities": (dvel.reshape(n, T, 10), "defender"),
        "PlayerAccelerations": (dacc.reshape(n, T, 10), "defender"),
        "PlayerSpeeds": (np.linalg.norm(dvel, axis=-1), "defender"),
        "PlayerCoordinates": (centred.reshape(n, T, 10), "defender"),
    }
    mats, specs = [], []
    for name, (v, cat) in cols.items():
        mats.append(v.astype(np.float64))
        specs.append((name, v.shape[-1], cat))
    return np.concatenate(mats, -1), specs


def basketball_label(raw: dict) -> np.ndarray:
    """Majority, over frames, of the offense player nearest the ball."""
    d = np.linalg.norm(raw["offense"] - raw["ball"][:, :, None], axis=-1)
    nearest = d.argmin(-1)
    return np.array([np.bincount(r, minlength=5).argmax() for r in nearest])


# --------------------------------------------------------------------------
# entry points


def compute_domain_lfs(raw: dict, domain: str) -> tuple[np.ndarray, DomainLFLibrary]:
    if domain == "fly_like":
        values, specs = _fly_lfs(raw, compact=False)
    elif domain == "benchmark":
        values, specs = _fly_lfs(raw, compact=True)
    elif domain == "mouse_like":
        values, specs = _mouse_lfs(raw)
    elif domain == "basketball_like":
        values, specs = _basketball_lfs(raw)
    else:
        raise ValueError(f"unknown domain {domain!r}")
    if not np.all(np.isfinite(values)):
        raise SynthDataError("non-finite domain LF values")
    return values, DomainLFLibrary.from_specs(specs)


def lf_columns(values: np.ndarray, library: DomainLFLibrary) -> dict[str, np.ndarray]:
    out = {}
    for e in library:
        v = values[..., e.columns[0]:e.columns[1]]
        out[e.name] = v[..., 0] if e.width == 1 else v
    return out


PLANTED = {
    "benchmark": {
        "task": "lunge",
        "program": "Map(SimpleITE(Affine(FacingAngle), Affine(Speed), Affine(FlyDistance)))",
        "params": {"r.0.0": [-40.0, 16.0], "r.0.1": [2.0, -10.0], "r.0.2": [-2.0, 6.0]},
    },
    "basketball_like": {
        "task": "ballhandler",
        "program": "Fold(Affine(PlayerSpeeds))",
        "params": {"r.0": np.hstack([np.eye(5), np.zeros((5, 1))]).tolist()},
    },
}


# the benchmark search runs with every domain LF behind a trainable affine map
DOMAIN_GRAMMAR_OPTIONS = {"benchmark": {"affine_leaves": True}}


def dataset_grammar(ds: TrajectoryDataset, max_depth: int | None = None,
                    options: GrammarOptions | None = None) -> Grammar:
    """Grammar over the dataset's LF library with the matching task shape."""
    if options is None:
        extra = DOMAIN_GRAMMAR_OPTIONS.get(ds.domain, {})
        options = GrammarOptions(task="sequence", seq_len=ds.domain_lf_values.shape[1], **extra) \
            if ds.is_sequential else GrammarOptions(**extra)
    return build_grammar(ds.library, ds.num_classes, max_depth, options)


def planted_program(ds: TrajectoryDataset, grammar: Grammar | None = None):
    """(architecture, parameters) of the planted rule, for acceptance checks only."""
    from .diffexec import ParameterStore
    from .dsl import parse_program

    if not ds.planted:
        raise SynthDataError(f"no planted program for domain {ds.domain!r}")
    grammar = grammar or dataset_grammar(ds)
    arch = parse_program(ds.planted["program"], grammar)
    slots = {}
    for key, v in ds.planted["params"].items():
        path = tuple(int(p) for p in key.split(".")[1:])
        slots[path] = np.asarray(v, dtype=np.float64)
    return arch, ParameterStore(slots)


def _flatten_raw(raw: dict, n: int, sequential: bool) -> tuple[np.ndarray, list[str]]:
    mats, names = [], []
    for k in sorted(raw):
        v = raw[k]
        lead = 2 if sequential else 1
        flat = v.reshape(*v.shape[:lead], -1)
        mats.append(flat)
        names += [f"{k}[{i}]" for i in range(flat.shape[-1])]
    return np.concatenate(mats, -1), names


def generate(config: WorldConfig) -> TrajectoryDataset:
    rng = np.random.default_rng(config.seed)
    if config.num_agents < 2:
        raise ValueError("need at least two agents")
    dom = config.domain
    if dom not in DEFAULT_MIX:
        raise ValueError(f"unknown domain {dom!r}")
    classes = config.classes
    if dom in ("fly_like", "benchmark"):
        raw = _simulate_fly(config, FLY_REGIONS if dom == "fly_like" else BENCH_REGIONS, rng)
        values, library = compute_domain_lfs(raw, dom)
        cols = lf_columns(values, library)
        labels = (fly_rules if dom == "fly_like" else benchmark_rules)(cols, classes)
        n, sequential = config.num_frames, False
    elif dom == "mouse_like":
        raw = _simulate_mouse(config, rng)
        values, library = compute_domain_lfs(raw, dom)
        labels = mouse_rules(lf_columns(values, library), classes)
        n, sequential = config.num_frames, False
    else:
        raw, _ = _simulate_basketball(config, rng)
        values, library = compute_domain_lfs(raw, dom)
        labels = basketball_label(raw)
        n, sequential = config.num_sequences, True
    labels = _count_preserving_noise(labels, config.label_noise, rng)
    features, names = _flatten_raw(raw, n, sequential)
    splits = _split_masks(n, config.split_fractions, rng)
    cfg = asdict(config)
    return TrajectoryDataset(features, labels, values, splits, library, classes, dom,
                             PLANTED.get(dom, {}), names, cfg)


# --------------------------------------------------------------------------
# persistence

SCHEMA_VERSION = 1


def save_dataset(ds: TrajectoryDataset, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    np.save(tmp / "features.npy", ds.features)
    np.save(tmp / "labels.npy", ds.labels)
    np.save(tmp / "domain_lf_values.npy", ds.domain_lf_values)
    for k, m in ds.splits.items():
        np.save(tmp / f"split_{k}.npy", m)
    schema = {
        "version": SCHEMA_VERSION,
        "domain": ds.domain,
        "classes": ds.classes,
        "library": ds.library.to_dict(),
        "feature_names": ds.feature_names,
        "splits": sorted(ds.splits),
        "config": ds.config,
        "sha256": ds.sha256(),
    }
    (tmp / "schema.json").write_text(json.dumps(schema, indent=2, default=list))
    (tmp / "planted.json").write_text(json.dumps(ds.planted, indent=2))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    schema = json.loads((path / "schema.json").read_text())
    if schema.get("version") != SCHEMA_VERSION:
        raise SynthDataError(f"unsupported dataset schema version {schema.get('version')!r}")
    splits = {k: np.load(path / f"split_{k}.npy") for k in schema["splits"]}
    planted_file = path / "planted.json"
    planted = json.loads(planted_file.read_text()) if planted_file.exists() else {}
    ds = TrajectoryDataset(np.load(path / "features.npy"), np.load(path / "labels.npy"),
                           np.load(path / "domain_lf_values.npy"), splits,
                           DomainLFLibrary.from_dict(schema["library"]), schema["classes"], schema["domain"],
                           planted, schema["feature_names"], schema["config"])
    if schema.get("sha256") and ds.sha256() != schema["sha256"]:
        raise SynthDataError(f"{path}: arrays do not match the checksum in schema.json")
    return ds
