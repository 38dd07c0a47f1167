"""Command-line entry points: ``lfsynth <command> [options]``.

Commands: gen-data, synthesize, eval-lf, active-learn, weak-sup, report.
Exit status 0 on success, 1 on internal errors, 2 on invalid config or input.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, dump_config, load_config_dict, read_config_file,
                     write_atomic)
from .diversity import mean_pairwise_ted
from .dsl import DSLError, build_grammar
from .labelmodel import ABSTAIN, NoViableThreshold, apply_abstain
from .synth import LFSet, autoswap, f1_cost
from .synthdata import SynthDataError, TrajectoryDataset, generate, load_dataset, save_dataset

log = logging.getLogger("lfsynth")


class ArchiveSchemaMismatch(ValueError):
    pass


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def _output_dir(cfg: RunConfig, override: str | None) -> Path:
    return Path(override or cfg.output_dir)


def _load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    if not (path / "schema.json").exists():
        raise InputError(f"{path} is not a dataset directory (schema.json missing)")
    return load_dataset(path)


def grammar_for(ds: TrajectoryDataset, cfg: RunConfig):
    if ds.is_sequential:
        opts = cfg.grammar.options("sequence", ds.domain_lf_values.shape[1])
    else:
        opts = cfg.grammar.options()
    return build_grammar(ds.library, ds.num_classes, cfg.grammar.max_depth, opts)


def loop_config(cfg: RunConfig, no_diversity: bool = False):
    from .downstream.loops import LoopConfig

    synth = replace(cfg.synth, diversity_weight=0.0) if no_diversity else cfg.synth
    return LoopConfig(num_lfs=synth.num_lfs, synth=synth, downstream=cfg.downstream, student=cfg.student,
                      min_coverage=cfg.min_coverage)


def manifest(command: str, cfg: RunConfig, ds: TrajectoryDataset | None = None, data_path=None, **extra) -> dict:
    out = {"command": command, "version": __version__, "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
           "config": cfg.to_dict()}
    if ds is not None:
        out["dataset"] = {"path": str(data_path) if data_path else None, "sha256": ds.sha256(),
                          "domain": ds.domain}
    out.update(extra)
    return out


def _json(obj) -> str:
    return json.dumps(obj, indent=2, default=_default)


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def labeled_subset(ds: TrajectoryDataset, n: int, seed: int) -> np.ndarray:
    pool = ds.indices("train")
    if n > len(pool):
        raise InputError(f"asked for {n} labeled rows but the train split has {len(pool)}")
    return np.sort(np.random.default_rng(seed).choice(pool, n, replace=False))


# --------------------------------------------------------------------------
# summary tables and plots


def summarize(rows: list[dict], key: str = "amount", metric: str = "map") -> list[dict]:
    """Per (generator, key) mean and standard error over seeds."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        if r.get(metric) is None:
            continue
        groups.setdefault((r["generator"], r[key]), []).append(float(r[metric]))
    out = []
    for (gen, k), vals in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
        out.append({"generator": gen, key: k, "n_seeds": len(v), f"{metric}_mean": float(v.mean()),
                    f"{metric}_stderr": se})
    return out


def table_csv(table: list[dict]) -> str:
    if not table:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(table[0]))
    w.writeheader()
    w.writerows(table)
    return buf.getvalue()


def plot_curves(table: list[dict], path, key: str = "amount", metric: str = "map", title: str = "") -> Path:
    """Log-log amount vs metric, one line per generator with a standard-error band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.array([r[key] for r in table], dtype=float)
    for gen in sorted({r["generator"] for r in table}):
        rs = sorted((r for r in table if r["generator"] == gen), key=lambda r: r[key])
        x = np.array([r[key] for r in rs], dtype=float)
        m = np.array([r[f"{metric}_mean"] for r in rs])
        se = np.array([r[f"{metric}_stderr"] for r in rs])
        ax.plot(x, m, marker="o", label=gen)
        ax.fill_between(x, np.clip(m - se, 1e-6, None), m + se, alpha=0.2)
    # multiplier 0 (labeled only) has no place on a log axis
    ax.set_xscale("log" if (xs > 0).all() else "symlog")
    ax.set_yscale("log")
    ax.set_xlabel(key)
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    return write_atomic(path, buf.getvalue())


def _write_rows(out: Path, rows: list[dict], key: str, title: str, metrics=("map",)) -> dict:
    write_atomic(out / "rows.jsonl", "".join(json.dumps(r, default=_default) + "\n" for r in rows))
    tables = {}
    for metric in metrics:
        t = summarize(rows, key, metric)
        tables[metric] = t
        write_atomic(out / f"table_{metric}.csv", table_csv(t))
        if t:
            plot_curves(t, out / f"curves_{metric}.png", key, metric, title)
    return tables


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    world = cfg.world
    if args.seed is not None:
        world = replace(world, seed=args.seed)
    if args.num_frames is not None:
        world = replace(world, num_frames=args.num_frames)
    cfg = replace(cfg, world=world)
    ds = generate(world)
    out = Path(args.out) if args.out else _output_dir(cfg, None) / "data" / f"{cfg.domain}-seed{world.seed}"
    save_dataset(ds, out)
    write_atomic(out / "manifest.json", _json(manifest("gen-data", cfg, ds, out, prevalence=ds.prevalence())))
    print(f"wrote {out}")
    for name, p in ds.prevalence().items():
        print(f"  {name:16s} {p:.4f}")
    return 0


def cmd_synthesize(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    n = args.labeled or cfg.synth_labeled
    labeled = labeled_subset(ds, n, seed)
    g = grammar_for(ds, cfg)
    scfg = cfg.synth
    if args.num_lfs is not None:
        scfg = replace(scfg, num_lfs=args.num_lfs)
    if args.no_diversity:
        scfg = replace(scfg, diversity_weight=0.0)
    scfg = scfg.with_seed(seed)
    X, y = ds.domain_lf_values[labeled], ds.labels[labeled]
    t0 = time.time()
    lfs = autoswap(ds.library, g, X, y, scfg)
    archive = lfs.to_dict()
    archive["dataset_sha256"] = ds.sha256()
    archive["labeled_indices"] = labeled.tolist()
    out = Path(args.out) if args.out else \
        _output_dir(cfg, None) / "lfs" / f"{ds.domain}-seed{seed}{'-nodiv' if args.no_diversity else ''}.json"
    write_atomic(out, _json(archive))
    iterations = [{"iteration": i, "program": lf.text, "cost": lf.cost, "f1_cost": lf.f1_cost,
                   "diversity_cost": lf.diversity_cost, **lf.meta} for i, lf in enumerate(lfs)]
    write_atomic(out.with_suffix(".manifest.json"), _json(manifest(
        "synthesize", replace(cfg, synth=scfg), ds, args.data, archive=str(out), seed=seed, labeled=n,
        no_diversity=bool(args.no_diversity), iterations=iterations, ted_matrix=lfs.ted_matrix().tolist(),
        mean_pairwise_ted=mean_pairwise_ted([lf.arch for lf in lfs]), seconds=round(time.time() - t0, 2))))
    print(f"wrote {out}")
    for it in iterations:
        print(f"  [{it['iteration']}] {it['program']}  cost={it['cost']:.4f} "
              f"(f1 {it['f1_cost']:.4f}, diversity {it['diversity_cost']:.4f})")
    return 0


def load_archive(path, ds: TrajectoryDataset | None = None) -> LFSet:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise InputError(f"archive not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ArchiveSchemaMismatch(f"{path} is not JSON: {e}") from e
    try:
        lfs = LFSet.from_dict(d)
    except (KeyError, ValueError, DSLError) as e:
        raise ArchiveSchemaMismatch(f"{path}: {e}") from e
    if ds is not None and lfs.grammar.library != ds.library:
        raise ArchiveSchemaMismatch("archive was synthesized over a different domain-LF library")
    return lfs


def eval_lfs(lfs: LFSet, ds: TrajectoryDataset, min_coverage: float = 0.1) -> list[dict]:
    """Each LF alone on the test split; abstain thresholds are tuned on the validation split."""
    from .downstream.metrics import task_map

    k = ds.num_classes
    Xv, yv = ds.split("val")
    Xt, yt = ds.split("test")
    rows = []
    for i, lf in enumerate(lfs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoViableThreshold)
            ab = apply_abstain(lf, Xv, yv, k, min_coverage, name=lf.text)
        probs = lf.predict_proba(Xt)
        votes = ab.votes_from_probs(probs)
        on = votes != ABSTAIN
        row = {"index": i, "program": lf.text, "tau": ab.tau, "fallback": ab.fallback,
               "coverage": float(on.mean()), "f1": 1.0 - f1_cost(probs, yt, k),
               "map": task_map(probs, yt, k), "undefined": False}
        if on.any():
            row["f1_covered"] = 1.0 - f1_cost(np.eye(k)[votes[on]], yt[on], k)
        else:
            row["f1_covered"] = None
            row["undefined"] = True
        rows.append(row)
    return rows


def cmd_eval_lf(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    lfs = load_archive(args.archive, ds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = eval_lfs(lfs, ds, cfg.min_coverage)
    out = Path(args.out) if args.out else Path(args.archive).with_suffix(".eval.json")
    write_atomic(out, _json({"archive": str(args.archive), "dataset_sha256": ds.sha256(), "lfs": rows}))
    for r in rows:
        cov = "undefined" if r["undefined"] else f"{r['f1_covered']:.4f}"
        print(f"  [{r['index']}] {r['program']}  F1={r['f1']:.4f} mAP={r['map']:.4f} "
              f"coverage={r['coverage']:.3f} F1@covered={cov}")
    return 0


def _al_job(data_path: str, cfg_dict: dict, generator: str, seed: int, no_diversity: bool) -> list[dict]:
    from .downstream.loops import active_learning_run

    cfg = load_config_dict(cfg_dict)
    ds = _load_dataset(data_path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return active_learning_run(ds.library, grammar_for(ds, cfg), ds, cfg.schedule, generator, cfg.sampling,
                                   loop_config(cfg, no_diversity), seed)


def _ws_job(data_path: str, cfg_dict: dict, generator: str, seed: int, no_diversity: bool) -> list[dict]:
    from .downstream.loops import weak_supervision_run

    cfg = load_config_dict(cfg_dict)
    ds = _load_dataset(data_path)
    labeled = labeled_subset(ds, cfg.weak_supervision.labeled, seed)
    unlabeled = np.setdiff1d(ds.indices("train"), labeled)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return weak_supervision_run(ds.library, grammar_for(ds, cfg), ds, labeled, unlabeled,
                                    cfg.weak_supervision.multipliers, generator, loop_config(cfg, no_diversity),
                                    seed)


def _run_jobs(fn, jobs: list[tuple], n_workers: int) -> list[list[dict]]:
    """Run independent (generator, seed) jobs; results come back in submission order."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as ex:
        futs = [ex.submit(fn, *j) for j in jobs]
        return [f.result() for f in futs]


def _loop_command(args, cfg: RunConfig, fn, name: str, key: str, metrics) -> int:
    ds = _load_dataset(args.data)
    gens = tuple(args.generators) if args.generators else cfg.generators
    seeds = tuple(args.seeds) if args.seeds else cfg.seeds
    if args.schedule:
        cfg = replace(cfg, schedule=tuple(args.schedule))
    cfg = replace(cfg, generators=gens, seeds=seeds)
    cfg_dict = cfg.to_dict()
    jobs = [(str(args.data), cfg_dict, g, s, bool(args.no_diversity)) for g in gens for s in seeds]
    t0 = time.time()
    rows = [r for res in _run_jobs(fn, jobs, args.jobs) for r in res]
    out = Path(args.out) if args.out else _output_dir(cfg, None) / name / ds.domain
    for r in rows:
        r.pop("labeled", None)
    tables = _write_rows(out, rows, key, f"{name} ({ds.domain})", metrics)
    write_atomic(out / "manifest.json", _json(manifest(name, cfg, ds, args.data, jobs=args.jobs,
                                                          no_diversity=bool(args.no_diversity),
                                                          seconds=round(time.time() - t0, 2))))
    write_atomic(out / "config.yaml", dump_config(cfg))
    print(f"wrote {out}")
    for r in tables[metrics[0]]:
        print(f"  {r['generator']:16s} {key}={r[key]:<6} {metrics[0]}={r[metrics[0] + '_mean']:.4f} "
              f"± {r[metrics[0] + '_stderr']:.4f} (n={r['n_seeds']})")
    return 0


def cmd_active_learn(args, cfg: RunConfig) -> int:
    return _loop_command(args, cfg, _al_job, "active-learn", "amount", ("map",))


def cmd_weak_sup(args, cfg: RunConfig) -> int:
    return _loop_command(args, cfg, _ws_job, "weak-sup", "multiplier", ("map", "map_ground_truth"))


def cmd_report(args, cfg: RunConfig) -> int:
    for run in args.runs:
        run = Path(run)
        f = run / "rows.jsonl"
        if not f.exists():
            raise InputError(f"{run} has no rows.jsonl")
        rows = [json.loads(line) for line in f.read_text().splitlines() if line.strip()]
        key = "multiplier" if rows and "multiplier" in rows[0] else "amount"
        metrics = ("map", "map_ground_truth") if key == "multiplier" else ("map",)
        tables = _write_rows(run, rows, key, run.name, metrics)
        print(f"{run}:")
        for r in tables["map"]:
            print(f"  {r['generator']:16s} {key}={r[key]:<6} map={r['map_mean']:.4f} "
                  f"± {r['map_stderr']:.4f} (n={r['n_seeds']})")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfsynth", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration (unknown keys are errors)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic trajectory dataset")
    g.add_argument("--domain", help="domain preset (overrides the config file)")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-frames", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("synthesize", help="synthesize a task-level LF set")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--labeled", type=int, help="number of labeled train rows (default: config synth_labeled)")
    s.add_argument("--num-lfs", type=int)
    s.add_argument("--no-diversity", action="store_true", help="set the diversity weight to 0")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_synthesize)

    e = sub.add_parser("eval-lf", help="evaluate each archived LF on its own")
    e.add_argument("--archive", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval_lf)

    for name, fn, helptext in (("active-learn", cmd_active_learn, "active-learning curves"),
                               ("weak-sup", cmd_weak_sup, "weak-supervision curves")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--data", required=True)
        a.add_argument("--generators", nargs="+")
        a.add_argument("--seeds", nargs="+", type=int)
        a.add_argument("--schedule", nargs="+", type=int, help="labeled amounts (active-learn only)")
        a.add_argument("--no-diversity", action="store_true")
        a.add_argument("--jobs", type=int, default=1, help="seed-level worker processes")
        a.add_argument("--out")
        a.set_defaults(fn=fn)

    r = sub.add_parser("report", help="rebuild tables and plots from saved run rows")
    r.add_argument("runs", nargs="+")
    r.set_defaults(fn=cmd_report)
    return p


INPUT_ERRORS = (ConfigError, InputError, ArchiveSchemaMismatch, SynthDataError, DSLError, FileNotFoundError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        raw = read_config_file(args.config)
        if getattr(args, "domain", None):
            raw = {**raw, "domain": args.domain}
            if isinstance(raw.get("world"), dict):
                raw["world"] = {k: v for k, v in raw["world"].items() if k != "domain"}
        cfg = load_config_dict(raw)
        return args.fn(args, cfg)
    except INPUT_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report anything else as an internal error
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
