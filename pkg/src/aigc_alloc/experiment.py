"""Solver registry shared by the command line and the acceptance suite.

Every solver is run through :func:`run_solver`, which returns the learning
curve, the final per-scenario reports on the held-out evaluation set and a
text checkpoint (``None`` for solvers without parameters).
"""

import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import baselines as bl
from . import diffusion_policy as dp
from . import tensor_nn as nn
from .critic_trainer import (LearningCurve, TrainConfig, eval_scenarios, evaluate_actions,
                             evaluate_policy, train, worker_count)
from .errors import ConfigError
from .scenario import QoEReport, evaluate
from .seeding import stream

log = logging.getLogger(__name__)

LEARNING = ("codi", "sac", "ppo")
FIXED = ("greedy", "random", "oracle")
SOLVERS = LEARNING + FIXED


@dataclass
class SolverRun:
    solver: str
    seed: int
    curve: LearningCurve
    reports: List[QoEReport]
    checkpoint: Optional[str] = None
    elapsed: float = 0.0  # wall-clock seconds

    @property
    def mean_reward(self):
        return float(np.mean([r.reward for r in self.reports]))

    @property
    def mean_total_qoe(self):
        return float(np.mean([r.total_qoe for r in self.reports]))


def constant_curve(cfg: TrainConfig, value) -> LearningCurve:
    """Flat curve at every evaluation step, for solvers that do not learn."""
    curve = LearningCurve()
    for step in range(cfg.eval_every, cfg.total_steps + 1, cfg.eval_every):
        curve.append(step, value)
    return curve


def fixed_reports(solver, cfg: TrainConfig, scenarios) -> List[QoEReport]:
    if solver == "greedy":
        return [evaluate(sc, bl.greedy_allocate(sc)) for sc in scenarios]
    if solver == "random":
        rng = stream(cfg.seed, "explore")
        return [evaluate(sc, bl.random_policy(sc, rng)) for sc in scenarios]
    if solver == "oracle":
        return [evaluate(sc, bl.oracle(sc).decision) for sc in scenarios]
    raise ConfigError(f"unknown solver {solver!r}; choose from {list(SOLVERS)}")


def _run_fixed(solver, cfg, progress):
    reports = fixed_reports(solver, cfg, eval_scenarios(cfg))
    mean = float(np.mean([r.reward for r in reports]))
    curve = constant_curve(cfg, mean)
    if progress:
        for step, value in zip(curve.steps, curve.values):
            progress(step, value)
    return SolverRun(solver, cfg.seed, curve, reports)


def _run_codi(cfg, progress):
    res = train(cfg, progress)
    return SolverRun("codi", cfg.seed, res.curve, res.final_reports, dp.actor_to_text(res.actor))


def _run_baseline(train_fn, kind):
    def run(cfg, progress):
        policy, curve, _, _, reports = train_fn(cfg, progress)
        return SolverRun(kind, cfg.seed, curve, reports, policy_to_text(policy))
    return run


_RUNNERS: Dict[str, Callable] = {
    "codi": _run_codi,
    "sac": _run_baseline(bl.train_sac_lite, "sac"),
    "ppo": _run_baseline(bl.train_ppo_lite, "ppo"),
}


def run_solver(solver: str, cfg: TrainConfig, progress=None) -> SolverRun:
    if solver not in SOLVERS:
        raise ConfigError(f"unknown solver {solver!r}; choose from {list(SOLVERS)}")
    log.info("running %s (N=%d, seed=%d, %d steps)", solver, cfg.num_users, cfg.seed,
             cfg.total_steps)
    start = time.perf_counter()
    if solver in FIXED:
        run = _run_fixed(solver, cfg, progress)
    else:
        run = _RUNNERS[solver](cfg, progress)
    run.elapsed = time.perf_counter() - start
    return run



def _run_job(job):
    solver, cfg = job
    return run_solver(solver, cfg)


def run_jobs(jobs, workers=None) -> List[SolverRun]:
    """Run ``(solver, TrainConfig)`` jobs, in separate processes when
    ``workers`` (default ``AIGC_ALLOC_THREADS``) exceeds one.

    Each job is seeded only by its own config, so the results do not depend
    on the worker count; they are returned in job order.
    """
    jobs = list(jobs)
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(_run_job, jobs))

# --------------------------------------------------------------------------
# checkpoints for trained policies
# --------------------------------------------------------------------------

def policy_to_text(policy: bl.BaselinePolicy) -> str:
    head = f"policy {policy.kind} {policy.num_users}"
    if policy.log_std is not None:
        head += " " + " ".join(repr(float(v)) for v in policy.log_std.data)
    return head + "\n" + nn.mlp_to_text(policy.net)


def policy_from_text(text: str) -> bl.BaselinePolicy:
    fh = io.StringIO(text)
    tag, kind, n, *log_std = fh.readline().split()
    if tag != "policy":
        raise ConfigError("policy checkpoint must start with a policy line")
    net = nn._read_mlp(fh)
    std = nn.Tensor(np.array([float(v) for v in log_std])) if log_std else None
    return bl.BaselinePolicy(kind, int(n), net, std)


def checkpoint_reports(solver, text, cfg: TrainConfig):
    """Re-score a saved checkpoint on the evaluation set of ``cfg``."""
    scenarios = eval_scenarios(cfg)
    if solver == "codi":
        actor = dp.actor_from_text(text)
        _, reports = evaluate_policy(actor, scenarios, cfg.seed)
    else:
        policy = policy_from_text(text)
        _, reports = evaluate_actions(policy.act, scenarios)
    return reports

