"""Command-line front end.

    python -m aigc_alloc train --config run.yaml --seed 0,1 --set train.total_steps=5000
    python -m aigc_alloc sweep-users --config sweep.yaml
    python -m aigc_alloc oracle --config oracle.yaml
    python -m aigc_alloc gradcheck
    python -m aigc_alloc evaluate --config run.yaml

Config files are YAML mappings with the keys listed in ``CONFIG_KEYS``.
``--set key=value`` overrides (dotted keys reach into sections; values are
parsed as YAML) win over the file, and ``--seed``/``--out`` win over both.

Exit status: 0 on success, 1 when a run fails (capacity, infeasible grid,
failed gradient check), 2 for unusable configuration, 3 when training
produced non-finite values.
"""

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from typing import List

import numpy as np
import yaml

from . import __version__, gradcheck
from ._jit import backend_name
from .baselines import oracle_grid_search
from .critic_trainer import TrainConfig, TrainingDiverged
from .errors import AllocError, ConfigError
from .critic_trainer import worker_count
from .experiment import FIXED, SOLVERS, checkpoint_reports, run_jobs, run_solver
from .scenario import (SamplerConfig, default_sampler, scenario_from_dict,
                       scenario_to_dict)
from .seeding import PRNG_NAME

log = logging.getLogger("aigc_alloc")

CONFIG_KEYS = {
    "solver": "codi",
    "solvers": list(SOLVERS),
    "seeds": [0],
    "out": "runs",
    "preset": None,
    "scenario": {},
    "sampler": {},
    "train": {},
    "user_counts": [2, 4, 6],
}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"sampler", "seed"}

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad configuration: reported with exit status 2."""


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def load_config(path, overrides=(), seeds=None, out=None) -> dict:
    if path is None:
        raw = {}
    else:
        if not os.path.isfile(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise UsageError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = copy.deepcopy(CONFIG_KEYS)
    cfg.update(raw)
    for item in overrides:
        apply_override(cfg, item)
    if seeds is not None:
        cfg["seeds"] = parse_seeds(seeds)
    if out is not None:
        cfg["out"] = out
    check_config(cfg)
    return cfg


def apply_override(cfg: dict, item: str):
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {item!r}")
    parts = key.split(".")
    if parts[0] not in CONFIG_KEYS:
        raise UsageError(f"unknown config key in --set: {key}")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = yaml.safe_load(value)


def parse_seeds(text) -> List[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seed expects comma-separated integers, got {text!r}") from None
    return seeds


def check_config(cfg):
    if cfg["solver"] not in SOLVERS:
        raise UsageError(f"unknown solver {cfg['solver']!r}; choose from {list(SOLVERS)}")
    bad = [s for s in cfg["solvers"] if s not in SOLVERS]
    if bad or not cfg["solvers"]:
        raise UsageError(f"solvers must be a non-empty subset of {list(SOLVERS)}, got {bad}")
    seeds = cfg["seeds"]
    if isinstance(seeds, int):
        seeds = cfg["seeds"] = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise UsageError("seeds must be a non-empty list of non-negative integers")
    if not cfg["user_counts"] or not all(isinstance(n, int) and n > 0 for n in cfg["user_counts"]):
        raise UsageError("user_counts must be positive integers")
    for section in ("scenario", "sampler", "train"):
        if not isinstance(cfg[section], dict):
            raise UsageError(f"{section} must be a mapping")
    unknown = set(cfg["train"]) - _TRAIN_FIELDS
    if unknown:
        raise UsageError(f"unknown train keys: {sorted(unknown)}")
    if cfg["sampler"] and (cfg["preset"] or cfg["scenario"]):
        raise UsageError("give either a sampler section or a fixed scenario/preset, not both")


def fixed_scenario(cfg, num_users=None):
    fields = dict(cfg["scenario"])
    fields.setdefault("preset", cfg["preset"] or "default")
    if num_users is not None:
        fields["num_users"] = num_users
    return scenario_from_dict(fields)


def scenario_family(cfg, num_users=None) -> SamplerConfig:
    """Sampler for training and evaluation.

    With a ``sampler`` section (or nothing at all) scenarios are drawn from
    the default ranges with any overrides applied.  With ``preset`` or
    ``scenario`` the family is pinned to that one scenario.
    """
    if cfg["preset"] or cfg["scenario"]:
        sc = fixed_scenario(cfg, num_users)
        theta = sorted(set(sc.qoe_threshold))
        if len(theta) != 1:
            raise ConfigError("a fixed scenario family needs one threshold shared by all users")
        return SamplerConfig(base=sc, bandwidth_range=(sc.bandwidth_budget,) * 2,
                             compute_range=(sc.compute_budget,) * 2,
                             threshold_range=(theta[0], theta[0]))
    kw = dict(cfg["sampler"])
    n = num_users if num_users is not None else kw.get("num_users", 3)
    kw.pop("num_users", None)
    return default_sampler(int(n), **kw)


def train_config(cfg, seed, num_users=None) -> TrainConfig:
    return TrainConfig(sampler=scenario_family(cfg, num_users), seed=seed, **cfg["train"])


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return repr(float(v))


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(out, command, cfg, started, files, metrics):
    missing = [f for f in files if not os.path.isfile(os.path.join(out, f))]
    if missing:
        raise AllocError(f"expected outputs were not written: {missing}")
    manifest = {
        "command": command,
        "config": cfg,
        "version": __version__,
        "kernel_backend": backend_name(),
        "prng": PRNG_NAME,
        "started": started,
        "finished": _now(),
        "files": sorted(files),
        "metrics": metrics,
    }
    with open(os.path.join(out, f"manifest_{command}.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _progress(solver, seed):
    def report(step, value):
        log.info("%s seed %d step %d mean reward %.4f", solver, seed, step, value)
    return report


def _run_all(jobs):
    """Seeds run in worker processes when AIGC_ALLOC_THREADS > 1; progress
    logging is only available in the sequential path."""
    if worker_count() > 1:
        return run_jobs(jobs)
    return [run_solver(solver, tc, _progress(solver, tc.seed)) for solver, tc in jobs]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(cfg) -> int:
    out, solver = cfg["out"], cfg["solver"]
    os.makedirs(out, exist_ok=True)
    started, files, metrics = _now(), [], {}
    runs = _run_all([(solver, train_config(cfg, seed)) for seed in cfg["seeds"]])
    for seed, run in zip(cfg["seeds"], runs):
        name = f"curve_{solver}_{seed}.csv"
        run.curve.write_csv(os.path.join(out, name))
        files.append(name)
        if run.checkpoint is not None:
            ck = f"checkpoint_{solver}_{seed}.txt"
            with open(os.path.join(out, ck), "w", newline="\n") as fh:
                fh.write(run.checkpoint)
            files.append(ck)
        metrics[str(seed)] = {"final_mean_reward": run.mean_reward,
                              "final_mean_total_qoe": run.mean_total_qoe}
        print(f"{solver} seed {seed}: mean reward {run.mean_reward:.4f}, "
              f"mean total QoE {run.mean_total_qoe:.4f}")
    write_manifest(out, "train", cfg, started, files, metrics)
    return EXIT_OK


def cmd_sweep_users(cfg) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    started, rows, metrics = _now(), [], {}
    for n in cfg["user_counts"]:
        for solver in cfg["solvers"]:
            runs = _run_all([(solver, train_config(cfg, seed, n)) for seed in cfg["seeds"]])
            vals = []
            for seed, run in zip(cfg["seeds"], runs):
                rows.append([solver, n, seed, _num(run.mean_total_qoe)])
                vals.append(run.mean_total_qoe)
            metrics[f"{solver}/{n}"] = float(np.mean(vals))
            print(f"N={n} {solver}: mean total QoE {np.mean(vals):.4f} over {len(vals)} seeds")
    write_csv(os.path.join(out, "qoe_vs_users.csv"), ["solver", "num_users", "seed", "total_qoe"],
              rows)
    write_manifest(out, "sweep-users", cfg, started, ["qoe_vs_users.csv"], metrics)
    return EXIT_OK


def cmd_oracle(cfg) -> int:
    out = cfg["out"]
    sc = fixed_scenario(cfg)
    started = _now()
    res = oracle_grid_search(sc)
    os.makedirs(out, exist_ok=True)
    dec = res.decision
    rows = [[i, _num(dec.resolution_ratio[i]), int(dec.diffusion_step[i]), _num(res.total_qoe),
             _num(res.reward), res.ties] for i in range(sc.num_users)]
    write_csv(os.path.join(out, "oracle.csv"),
              ["user", "resolution_ratio", "diffusion_step", "total_qoe", "reward", "ties"], rows)
    print(f"oracle: total QoE {res.total_qoe:.6f}, reward {res.reward:.6f}, "
          f"{res.n_feasible}/{res.n_evaluated} feasible grid points")
    print(f"ties: {res.ties}")
    snapshot = dict(cfg, scenario=scenario_to_dict(sc))
    write_manifest(out, "oracle", snapshot, started, ["oracle.csv"],
                   {"total_qoe": res.total_qoe, "reward": res.reward, "ties": res.ties})
    return EXIT_OK


def cmd_gradcheck(cfg=None) -> int:
    results = gradcheck.run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_err)
    print(f"{len(results) - len(failed)}/{len(results)} suites passed; "
          f"max relative error {worst.max_rel_err:.3e} ({worst.name})")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_evaluate(cfg) -> int:
    """Score saved checkpoints (or a fixed solver) on each seed's evaluation set."""
    out, solver = cfg["out"], cfg["solver"]
    started, files, metrics = _now(), [], {}
    for seed in cfg["seeds"]:
        tc = train_config(cfg, seed)
        if solver in FIXED:
            reports = run_solver(solver, tc.replace(total_steps=0)).reports
        else:
            ck = os.path.join(out, f"checkpoint_{solver}_{seed}.txt")
            if not os.path.isfile(ck):
                raise UsageError(f"checkpoint not found: {ck} (run train first)")
            with open(ck) as fh:
                reports = checkpoint_reports(solver, fh.read(), tc)
        name = f"eval_{solver}_{seed}.csv"
        os.makedirs(out, exist_ok=True)
        write_csv(os.path.join(out, name), ["index", "total_qoe", "reward", "feasible"],
                  [[i, _num(r.total_qoe), _num(r.reward), int(r.feasible)]
                   for i, r in enumerate(reports)])
        files.append(name)
        mean = float(np.mean([r.reward for r in reports]))
        metrics[str(seed)] = {"mean_reward": mean}
        print(f"{solver} seed {seed}: mean reward {mean:.4f} over {len(reports)} scenarios")
    write_manifest(out, "evaluate", cfg, started, files, metrics)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep-users": cmd_sweep_users,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "evaluate": cmd_evaluate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="aigc-alloc",
                                description="QoE-driven resolution/diffusion-step allocation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry (dotted keys, YAML values); repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
