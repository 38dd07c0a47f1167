"""Run configuration: one YAML file resolving every preset the experiment needs."""
from __future__ import annotations

import dataclasses
import os
import tempfile
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .diffexec import DIFF_PRESETS
from .downstream.classifier import DOWNSTREAM_PRESETS, DownstreamConfig
from .downstream.loops import GENERATORS, SAMPLERS, WS_MULTIPLIERS, check_schedule
from .dsl import GrammarOptions
from .synth import SYNTH_PRESETS, SynthConfig
from .synthdata import DEFAULT_MIX, DOMAIN_GRAMMAR_OPTIONS, WorldConfig

OUTPUT_ENV = "LFSYNTH_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


# per-domain defaults sized for a single CPU
DOMAIN_DEFAULTS = {
    "benchmark": {"world": {"num_frames": 20000}, "diff": "synthetic", "downstream": "synthetic",
                  "schedule": (50, 100, 200, 400)},
    "fly_like": {"world": {}, "diff": "synthetic", "downstream": "synthetic",
                 "schedule": (100, 200, 350, 500, 750, 1250)},
    "mouse_like": {"world": {}, "diff": "synthetic", "downstream": "synthetic",
                   "schedule": (100, 200, 350, 500, 750, 1250)},
    "basketball_like": {"world": {}, "diff": "basketball", "downstream": "synthetic_recurrent",
                        "schedule": (50, 100, 200, 400)},
}


@dataclass(frozen=True)
class GrammarConfig:
    max_depth: int | None = None
    ops: tuple[str, ...] = GrammarOptions().ops
    include_input: bool = False
    fold_init: float = 0.0
    affine_leaves: bool = False

    def options(self, task: str = "frame", seq_len: int | None = None) -> GrammarOptions:
        return GrammarOptions(task=task, seq_len=seq_len, ops=self.ops, include_input=self.include_input,
                              fold_init=self.fold_init, affine_leaves=self.affine_leaves)


@dataclass(frozen=True)
class WeakSupConfig:
    labeled: int = 100
    multipliers: tuple[int, ...] = WS_MULTIPLIERS


@dataclass(frozen=True)
class RunConfig:
    domain: str = "benchmark"
    world: WorldConfig = field(default_factory=lambda: WorldConfig(domain="benchmark", num_frames=20000))
    grammar: GrammarConfig = field(default_factory=lambda: GrammarConfig(affine_leaves=True))
    synth: SynthConfig = field(default_factory=lambda: SYNTH_PRESETS["synthetic"])
    downstream: DownstreamConfig = field(default_factory=lambda: DOWNSTREAM_PRESETS["synthetic"])
    student: DownstreamConfig = field(default_factory=lambda: DOWNSTREAM_PRESETS["synthetic"])
    schedule: tuple[int, ...] = (50, 100, 200, 400)
    weak_supervision: WeakSupConfig = field(default_factory=WeakSupConfig)
    synth_labeled: int = 200
    generators: tuple[str, ...] = GENERATORS
    sampling: str = "max_entropy"
    min_coverage: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.domain not in DEFAULT_MIX:
            raise ConfigError(f"unknown domain preset {self.domain!r}; expected one of {sorted(DEFAULT_MIX)}")
        if self.world.domain != self.domain:
            raise ConfigError(f"world.domain {self.world.domain!r} differs from domain {self.domain!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = set(self.generators) - set(GENERATORS)
        if unknown:
            raise ConfigError(f"unknown generators {sorted(unknown)}")
        if self.sampling not in SAMPLERS:
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        try:
            check_schedule(self.schedule)
            check_schedule(self.weak_supervision.multipliers)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.synth_labeled < 1 or self.weak_supervision.labeled < 1:
            raise ConfigError("labeled-set sizes must be positive")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        return load_config_dict(d or {})


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tuples(x):
    if isinstance(x, (list, tuple)):
        return tuple(_tuples(v) for v in x)
    return x


def merge(base, overrides: dict | None, where: str = ""):
    """Dataclass ``base`` with ``overrides`` applied recursively; unknown keys are errors."""
    if overrides is None:
        return base
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(overrides).__name__}")
    names = {f.name for f in fields(base)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    changes = {}
    for k, v in overrides.items():
        cur = getattr(base, k)
        if is_dataclass(cur) and isinstance(v, dict):
            changes[k] = merge(cur, v, f"{where}.{k}" if where else k)
        elif isinstance(v, list):
            changes[k] = _tuples(v)
        else:
            changes[k] = v
    try:
        return replace(base, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _preset(table: dict, section: dict, default: str, where: str):
    section = dict(section or {})
    name = section.pop("preset", default)
    if name not in table:
        raise ConfigError(f"{where}: unknown preset {name!r}; expected one of {sorted(table)}")
    return merge(table[name], section, where)


def load_config_dict(d: dict) -> RunConfig:
    """Resolve a raw mapping (as read from YAML) into a RunConfig."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be a mapping")
    d = dict(d)
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    domain = d.pop("domain", "benchmark")
    if domain not in DOMAIN_DEFAULTS:
        raise ConfigError(f"unknown domain preset {domain!r}; expected one of {sorted(DOMAIN_DEFAULTS)}")
    dd = DOMAIN_DEFAULTS[domain]

    world = merge(WorldConfig(domain=domain, **dd["world"]), d.pop("world", None), "world")
    grammar = merge(GrammarConfig(**DOMAIN_GRAMMAR_OPTIONS.get(domain, {})), d.pop("grammar", None), "grammar")

    synth_raw = dict(d.pop("synth", None) or {})
    diff_raw = synth_raw.pop("diff", None)
    div_raw = synth_raw.pop("diversity", None)
    synth = _preset(SYNTH_PRESETS, synth_raw, "synthetic", "synth")
    diff = _preset(DIFF_PRESETS, diff_raw if isinstance(diff_raw, dict) else {"preset": diff_raw or dd["diff"]},
                   dd["diff"], "synth.diff")
    diversity = merge(synth.diversity, div_raw, "synth.diversity")
    synth = replace(synth, diff=diff, diversity=diversity)

    downstream = _preset(DOWNSTREAM_PRESETS, d.pop("downstream", None), dd["downstream"], "downstream")
    student = _preset(DOWNSTREAM_PRESETS, d.pop("student", None), dd["downstream"], "student")
    ws = merge(WeakSupConfig(), d.pop("weak_supervision", None), "weak_supervision")

    rest = {k: _tuples(v) if isinstance(v, list) else v for k, v in d.items()}
    rest.setdefault("schedule", dd["schedule"])
    if "output_dir" not in rest and os.environ.get(OUTPUT_ENV):
        rest["output_dir"] = os.environ[OUTPUT_ENV]
    try:
        return RunConfig(domain=domain, world=world, grammar=grammar, synth=synth, downstream=downstream,
                         student=student, weak_supervision=ws, **rest)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def read_config_file(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return raw or {}


def load_config(path: str | os.PathLike | None) -> RunConfig:
    return load_config_dict(read_config_file(path))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def write_atomic(path: str | os.PathLike, data: str | bytes) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
