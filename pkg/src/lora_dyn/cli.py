"""Command-line entry point: ``lora-dyn run|preset|verify|sweep``.

Exit codes: 0 success, 1 usage or configuration error, 2 divergence or a
theorem check that did not hold.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib import resources

import jsonschema
import numpy as np

from .adapters import InitSpec
from .diagnostics import trajectory_csv
from .errors import ConfigurationError, DivergenceError, LoraDynError
from .optim import OptimSpec, run_training
from .synth import ProblemConfig, make_problem
from .theory import THEOREMS, evaluate_bound

SCHEMA_VERSION = "1"
OUT_ENV = "LORA_DYN_OUT"
DEFAULT_OUT = "lora_dyn_out"

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

# default config for ``verify THEOREM`` without --config
VERIFY_PRESETS = {
    "thm_3_1": "thm_3_1",
    "thm_3_2": "thm_3_2",
    "thm_3_6": "thm_3_6",
    "thm_c9": "thm_c9",
    "thm_c13": "thm_c13_kappa200",
    "thm_4_2": "thm_4_2",
    "lemma_c4": "lemma_c4",
    "lemma_d6": "lemma_d6",
}


class UsageError(LoraDynError):
    pass


# config handling -------------------------------------------------------

def preset_names():
    files = resources.files("lora_dyn").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def preset_text(name):
    if name not in preset_names():
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return resources.files("lora_dyn").joinpath("presets", f"{name}.json").read_text()


def _schema():
    return json.loads(resources.files("lora_dyn").joinpath("schema", "config.schema.json").read_text())


def load_config(source):
    """Read and validate a config from a path or ``preset:NAME``."""
    if source.startswith("preset:"):
        text = preset_text(source[len("preset:"):])
    else:
        try:
            with open(source) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config {source!r}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {source!r}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  at /{'/'.join(str(p) for p in e.absolute_path)}: {e.message}" for e in errors]
        raise UsageError("config failed schema validation:\n" + "\n".join(lines))
    if "sweep" in cfg and "variants" in cfg:
        raise UsageError("a config may define variants or a sweep, not both")
    # build every spec once so semantic errors surface before any compute
    for variant in _variants(cfg):
        try:
            _specs(cfg, variant, cfg["seeds"][0])
        except (LoraDynError, TypeError, KeyError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc


def _variants(cfg):
    return cfg.get("variants") or [None]


def _merged(cfg, variant, section):
    out = dict(cfg[section])
    if variant is not None:
        out.update(variant.get(section, {}))
    return out


def _specs(cfg, variant, seed):
    p = dict(cfg["problem"])
    if "spectrum" in p and p["spectrum"] is not None:
        p["spectrum"] = tuple(p["spectrum"])
    pconf = ProblemConfig(seed=int(seed), **p)
    init = _merged(cfg, variant, "init")
    if "kind" not in init or "rank" not in init:
        raise ConfigurationError("init needs at least kind and rank")
    ispec = InitSpec(**init)
    optim = _merged(cfg, variant, "optim")
    if "lambda" in optim:
        optim["lam"] = optim.pop("lambda")
    ospec = OptimSpec(**optim)
    return pconf, ispec, ospec


def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def _out_dir(args, cfg):
    if args.out:
        return args.out
    if cfg is not None and cfg.get("outputs", {}).get("dir"):
        return cfg["outputs"]["dir"]
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


def _seed_override(cfg, seed_list):
    if seed_list:
        try:
            seeds = [int(s) for s in seed_list.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"--seed-list must be comma-separated integers: {seed_list!r}") from exc
        if not seeds or min(seeds) < 0:
            raise UsageError("--seed-list must name at least one non-negative seed")
        cfg = copy.deepcopy(cfg)
        cfg["seeds"] = seeds
    return cfg


# execution -------------------------------------------------------------

def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def _run_one(task):
    """Run one (config, variant, seed) job; returns plain data for the parent."""
    cfg, variant, seed = task
    pconf, ispec, ospec = _specs(cfg, variant, seed)
    problem = make_problem(pconf)
    run_id = hashlib.sha256(canonical([cfg, variant, seed]).encode()).hexdigest()[:16]
    try:
        traj = run_training(problem, ispec, ospec, cfg.get("record_every", 1), config_id=run_id)
        diverged_at = None
    except DivergenceError as exc:
        traj, diverged_at = exc.trajectory, exc.step
    final = {k: _json_float(v) for k, v in asdict(traj.final()).items() if k != "step"}
    entry = {
        "variant": variant["name"] if variant else None,
        "seed": seed,
        "outcome": traj.outcome,
        "config_hash": traj.config_hash,
        "final_step": traj.final().step,
        "final": final,
        "min_angle_a": float(traj.column("angle_a").min()),
        "diverged_at": diverged_at,
    }
    return trajectory_csv(traj), entry


def _map(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))


def _csv_name(variant, seed):
    return f"{variant['name']}_seed{seed}.csv" if variant else f"seed{seed}.csv"


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def run_experiment(cfg, out_dir, jobs=1):
    """Run every (variant, seed) pair of ``cfg`` and write CSVs plus a summary."""
    formats = cfg.get("outputs", {}).get("formats", ["csv", "json"])
    tasks = [(cfg, v, s) for v in _variants(cfg) for s in cfg["seeds"]]
    results = _map(tasks, jobs)
    if "csv" in formats:
        for (_, v, s), (text, _) in zip(tasks, results):
            _write(os.path.join(out_dir, _csv_name(v, s)), text)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.get("name"),
        "config_hash": config_digest(cfg),
        "runs": [entry for _, entry in results],
    }
    if "json" in formats:
        _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _set_path(cfg, dotted, value):
    section, key = dotted.split(".", 1)
    cfg[section][key] = value


def _sort_key(values):
    return tuple((0, float(v), "") if isinstance(v, (int, float)) and not isinstance(v, bool)
                 else (1, 0.0, canonical(v)) for v in values)


def _stat(x):
    return str(x) if isinstance(x, int) else repr(float(x))


SWEEP_COLUMNS = ("n_seeds", "n_completed", "final_risk_median", "final_risk_min",
                 "final_risk_max", "min_angle_a_median", "min_angle_a_min", "min_angle_a_max")


def run_sweep(cfg, out_dir, jobs=1):
    """Cross product of the sweep axes with the seeds; one aggregate row per cell."""
    axes = cfg.get("sweep", {}).get("axes", {})
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise UsageError("sweep needs at least one axis with at least one value")
    names = sorted(axes)
    cells = sorted(itertools.product(*(axes[n] for n in names)), key=_sort_key)
    cell_cfgs = []
    for values in cells:
        c = copy.deepcopy(cfg)
        del c["sweep"]
        for n, v in zip(names, values):
            _set_path(c, n, v)
        try:
            validate_config(c)
        except UsageError as exc:
            raise UsageError(f"sweep cell {dict(zip(names, values))}: {exc}") from exc
        cell_cfgs.append(c)
    tasks = [(c, None, s) for c in cell_cfgs for s in cfg["seeds"]]
    results = _map(tasks, jobs)
    rows, cell_summaries, i = [], [], 0
    for idx, (values, c) in enumerate(zip(cells, cell_cfgs)):
        part = results[i:i + len(cfg["seeds"])]
        i += len(cfg["seeds"])
        cell_dir = os.path.join(out_dir, f"cell{idx:03d}")
        for s, (text, _) in zip(cfg["seeds"], part):
            _write(os.path.join(cell_dir, _csv_name(None, s)), text)
        entries = [e for _, e in part]
        risks = np.array([e["final"]["risk_fro"] if e["final"]["risk_fro"] is not None else np.inf
                          for e in entries])
        angles = np.array([e["min_angle_a"] for e in entries])
        stats = [len(entries), sum(e["outcome"] == "completed" for e in entries),
                 np.median(risks), risks.min(), risks.max(),
                 np.median(angles), angles.min(), angles.max()]
        rows.append([canonical(v) for v in values] + [_stat(x) for x in stats])
        cell_summaries.append({"cell": idx, "axes": dict(zip(names, values)),
                               "config_hash": config_digest(c), "runs": entries})
    header = ",".join(names + list(SWEEP_COLUMNS))
    _write(os.path.join(out_dir, "sweep.csv"), header + "\n" + "".join(",".join(r) + "\n" for r in rows))
    summary = {"schema_version": SCHEMA_VERSION, "name": cfg.get("name"),
               "config_hash": config_digest(cfg), "axes": names, "cells": cell_summaries}
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def verify(theorem_id, cfg):
    """Run the config per seed and evaluate ``theorem_id`` on each trajectory."""
    options = {k: v for k, v in cfg.get("verify", {}).items() if k in ("theta", "rho")}
    reports = []
    for variant in _variants(cfg):
        for seed in cfg["seeds"]:
            pconf, ispec, ospec = _specs(cfg, variant, seed)
            problem = make_problem(pconf)
            traj = run_training(problem, ispec, ospec, cfg.get("record_every", 1))
            rep = evaluate_bound(theorem_id, problem, traj, **options)
            d = rep.to_dict()
            d["seed"] = seed
            reports.append(d)
    return reports


# commands --------------------------------------------------------------

def cmd_run(args):
    cfg = _seed_override(load_config(args.config), args.seed_list)
    if "sweep" in cfg:
        raise UsageError("config defines a sweep; use 'lora-dyn sweep'")
    summary = run_experiment(cfg, _out_dir(args, cfg), args.jobs)
    for run in summary["runs"]:
        tag = f"{run['variant']}/" if run["variant"] else ""
        print(f"{tag}seed {run['seed']}: {run['outcome']} step {run['final_step']} "
              f"risk_fro {run['final']['risk_fro']}")
    return EXIT_OK if all(r["outcome"] == "completed" for r in summary["runs"]) else EXIT_FAILURE


def cmd_preset(args):
    if not args.name:
        print("\n".join(preset_names()))
        return EXIT_OK
    text = preset_text(args.name)
    if args.out:
        path = args.out
        if os.path.isdir(path):
            path = os.path.join(path, f"{args.name}.json")
        _write(path, text)
        print(path)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args):
    if args.theorem not in THEOREMS:
        raise UsageError(f"unknown theorem {args.theorem!r}; choose from {', '.join(THEOREMS)}")
    source = args.config or f"preset:{VERIFY_PRESETS[args.theorem]}"
    cfg = _seed_override(load_config(source), args.seed_list)
    try:
        reports = verify(args.theorem, cfg)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    spec = cfg.get("verify", {})
    expect = spec.get("expect", "hold") if spec.get("theorem", args.theorem) == args.theorem else "hold"
    evaluated = [r for r in reports if r["status"] == "evaluated"]
    held = bool(evaluated) and all(r["holds"] for r in evaluated)
    doc = {"schema_version": SCHEMA_VERSION, "theorem_id": args.theorem,
           "config_hash": config_digest(cfg), "expect": expect, "holds": held, "reports": reports}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    _write(os.path.join(_out_dir(args, cfg), f"verify_{args.theorem}.json"), text)
    sys.stdout.write(text)
    if held or expect == "expected-violation":
        return EXIT_OK
    return EXIT_FAILURE


def cmd_sweep(args):
    cfg = _seed_override(load_config(args.config), args.seed_list)
    summary = run_sweep(cfg, _out_dir(args, cfg), args.jobs)
    bad = [r for c in summary["cells"] for r in c["runs"] if r["outcome"] != "completed"]
    print(f"{len(summary['cells'])} cells written to {_out_dir(args, cfg)}")
    return EXIT_FAILURE if bad else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="lora-dyn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="config JSON path, or preset:NAME for a bundled preset")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs")
        p.add_argument("--seed-list", help="comma-separated seeds overriding the config")

    p = sub.add_parser("run", help="train every seed of a config")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("preset", help="list presets or print one")
    p.add_argument("name", nargs="?")
    p.add_argument("--out", help="write the preset to this file or directory")
    p.set_defaults(func=cmd_preset)
    p = sub.add_parser("verify", help="check a theorem's bound")
    p.add_argument("theorem", help=", ".join(THEOREMS))
    common(p, config_required=False)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("sweep", help="grid over the config's sweep axes")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
