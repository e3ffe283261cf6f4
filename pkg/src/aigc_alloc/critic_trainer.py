"""Double-Q critics, replay memory and the diffusion actor-critic loop.

Each episode is a single decision: draw a scenario, act once, observe the
penalised reward.  Critics therefore regress straight onto the reward (no
bootstrapping); the minimum of the two critics is what the actor ascends.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import diffusion_policy as dp
from . import tensor_nn as nn
from .errors import AllocError, ConfigError, ContractError
from .scenario import (SamplerConfig, Scenario, default_sampler, encode_state, evaluate,
                       project_feasible, sample_scenario, state_dim)
from .seeding import keyed_stream, stream

log = logging.getLogger(__name__)


class TrainingDiverged(AllocError, FloatingPointError):
    """A loss or reward became NaN or infinite."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    sampler: SamplerConfig = field(default_factory=lambda: default_sampler(3))
    total_steps: int = 20_000
    batch_size: int = 128
    capacity: int = 50_000
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    tau: float = 0.005
    warmup_steps: int = 1_000
    eval_every: int = 1_000
    eval_episodes: int = 100
    seed: int = 0
    K: int = 5
    beta_start: float = 1e-4
    beta_end: float = 0.1
    explore_std_start: float = 0.1
    explore_std_end: float = 0.01
    actor_hidden: tuple = (128, 128)
    critic_hidden: tuple = (128, 128)
    hidden_act: str = "relu"
    # baselines
    sac_temperature: float = 0.2
    ppo_clip: float = 0.2
    ppo_rollout: int = 512
    ppo_epochs: int = 10
    ppo_minibatch: int = 128
    ppo_lr: float = 3e-4

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        self.validate()

    @property
    def num_users(self):
        return self.sampler.num_users

    @property
    def penalty_coeff(self):
        return self.sampler.base.penalty_coeff

    def validate(self):
        for name in ("batch_size", "capacity", "eval_every", "eval_episodes", "K",
                     "ppo_rollout", "ppo_epochs", "ppo_minibatch"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        for name in ("total_steps", "warmup_steps"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        for name in ("lr_actor", "lr_critic", "ppo_lr", "explore_std_start", "explore_std_end",
                     "ppo_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sac_temperature < 0:
            raise ConfigError("sac_temperature must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.batch_size > self.capacity:
            raise ConfigError("batch_size cannot exceed the replay capacity")
        if self.K > dp.MAX_CHAIN:
            raise ConfigError(f"K={self.K} exceeds the supported chain length {dp.MAX_CHAIN}")
        if self.hidden_act not in nn.HIDDEN_ACTS:
            raise ConfigError(f"hidden_act must be one of {nn.HIDDEN_ACTS}")
        dp.schedule_new(self.K, self.beta_start, self.beta_end)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def explore_std(self, step):
        if self.total_steps <= 1:
            return self.explore_std_start
        frac = step / (self.total_steps - 1)
        return self.explore_std_start + frac * (self.explore_std_end - self.explore_std_start)


# --------------------------------------------------------------------------
# learning curve
# --------------------------------------------------------------------------

@dataclass
class LearningCurve:
    steps: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)

    def append(self, step, value):
        if self.steps and step <= self.steps[-1]:
            raise ContractError("learning-curve steps must be strictly increasing")
        self.steps.append(int(step))
        self.values.append(float(value))

    def __len__(self):
        return len(self.steps)

    @property
    def final(self):
        return self.values[-1] if self.values else float("nan")

    def steps_to_fraction(self, frac=0.9):
        """First step whose value reaches ``frac`` of the final value."""
        if not self.values:
            return None
        target = frac * self.final if self.final >= 0 else self.final / frac
        for s, v in zip(self.steps, self.values):
            if v >= target:
                return s
        return self.steps[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mean_reward"])
            for s, v in zip(self.steps, self.values):
                w.writerow([s, repr(v)])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["step", "mean_reward"]:
            raise ConfigError(f"{path} is not a learning-curve CSV")
        for s, v in rows[1:]:
            out.append(int(s), float(v))
        return out


# --------------------------------------------------------------------------
# critics and replay
# --------------------------------------------------------------------------

@dataclass
class CriticPair:
    q1: nn.Mlp
    q2: nn.Mlp
    q1_target: nn.Mlp
    q2_target: nn.Mlp
    tau: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        for a, b in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            if a.sizes != b.sizes:
                raise ContractError("critic and target shapes differ")

    @property
    def online_params(self):
        return self.q1.params + self.q2.params

    def q_min(self, sa):
        return np.minimum(nn.predict(self.q1, sa), nn.predict(self.q2, sa))


def critic_pair_new(input_dim, rng, hidden=(128, 128), tau=0.005, hidden_act="relu"):
    sizes = [input_dim, *hidden, 1]
    q1 = nn.mlp_init(sizes, rng, hidden_act=hidden_act)
    q2 = nn.mlp_init(sizes, rng, hidden_act=hidden_act)
    return CriticPair(q1, q2, q1.copy(), q2.copy(), tau)


def critic_loss(pair: CriticPair, states, actions, rewards) -> nn.Tensor:
    """``mean((Q1 - r)^2) + mean((Q2 - r)^2)``; the target is the reward."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] == 0:
        raise ContractError("critic_loss needs a non-empty batch")
    sa = np.concatenate([states, np.asarray(actions, dtype=np.float64)], axis=1)
    y = np.asarray(rewards, dtype=np.float64).reshape(-1, 1)
    return nn.add(nn.mse(nn.forward(pair.q1, sa), y), nn.mse(nn.forward(pair.q2, sa), y))


def soft_update(pair: CriticPair):
    """target <- (1 - tau) target + tau online, for both critics."""
    nn.soft_update(pair.q1_target, pair.q1, pair.tau)
    nn.soft_update(pair.q2_target, pair.q2, pair.tau)


class ReplayBuffer:
    """Fixed-capacity ring of (state, raw action, reward); oldest evicted first."""

    def __init__(self, capacity, state_dim, action_dim):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, state, action, reward):
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered(self):
        """Contents oldest-first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return self.states[idx], self.actions[idx], self.rewards[idx]

    def sample(self, rng, batch_size):
        if self.size == 0:
            raise ContractError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.states[idx], self.actions[idx], self.rewards[idx]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def worker_count():
    try:
        return max(1, int(os.environ.get("AIGC_ALLOC_THREADS", "1")))
    except ValueError:
        return 1


def _chunks(n, k):
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(k) if bounds[i + 1] > bounds[i]]


def evaluate_actions(act, scenarios: Sequence[Scenario], threads=None):
    """Run ``act(states) -> raw actions`` over ``scenarios``; decode, project, score.

    Work is split across ``threads`` workers (default: ``AIGC_ALLOC_THREADS``);
    results are merged in scenario order, so output does not depend on the
    thread count.
    """
    scenarios = list(scenarios)
    if not scenarios:
        return float("nan"), []
    states = np.stack([encode_state(sc) for sc in scenarios])
    threads = worker_count() if threads is None else max(1, int(threads))

    def run(lo, hi):
        raw = np.asarray(act(states[lo:hi]), dtype=np.float64).reshape(hi - lo, -1)
        out = []
        for sc, a in zip(scenarios[lo:hi], raw):
            dec = project_feasible(sc, dp.decode_decision(a, sc))
            out.append(evaluate(sc, dec))
        return out

    parts = _chunks(len(scenarios), min(threads, len(scenarios)))
    if len(parts) == 1:
        reports = run(*parts[0])
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as ex:
            reports = [r for chunk in ex.map(lambda p: run(*p), parts) for r in chunk]
    return float(np.mean([r.reward for r in reports])), reports


def chain_start(actor: dp.DiffusionActor, states, seed=0):
    """Initial Gaussian draw for evaluation, keyed by each state vector so the
    same scenario always starts from the same point."""
    states = np.atleast_2d(states)
    return np.stack([keyed_stream(seed, "eval_noise", s.tobytes()).standard_normal(actor.action_dim)
                     for s in states])


def evaluate_policy(actor: dp.DiffusionActor, scenarios, seed=0, threads=None):
    """Deterministic chain -> decode -> project -> evaluate.

    Returns ``(mean reward, reports)`` with reports in scenario order.
    """
    def act(states):
        return dp.sample_action(actor, states, mode="deterministic",
                                a_K=chain_start(actor, states, seed))

    return evaluate_actions(act, scenarios, threads)


def eval_scenarios(cfg: TrainConfig):
    rng = stream(cfg.seed, "eval_scenarios")
    return [sample_scenario(rng, cfg.sampler) for _ in range(cfg.eval_episodes)]


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    actor: object
    critics: Optional[CriticPair]
    curve: LearningCurve
    eval_set: list
    final_reports: list = field(default_factory=list)


def _check_finite(value, what, step):
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(f"non-finite {what} at step {step}: {value}")


def collect(sc, raw):
    dec = project_feasible(sc, dp.decode_decision(raw, sc))
    return evaluate(sc, dec)


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Train the conditional diffusion actor with double-Q critics.

    Per step: draw a scenario, act with the stochastic chain plus decaying
    Gaussian exploration, store (state, raw action, reward).  After
    ``warmup_steps`` every step does one critic step, one actor step against
    the frozen critics and one soft target update.  Every ``eval_every`` steps
    the deterministic policy is scored on a fixed held-out scenario set.
    """
    cfg.validate()
    N = cfg.num_users
    S, A = state_dim(N), 2 * N
    init_rng = stream(cfg.seed, "init")
    actor = dp.actor_new(N, init_rng, cfg.K, cfg.beta_start, cfg.beta_end,
                         cfg.actor_hidden, cfg.hidden_act)
    critics = critic_pair_new(S + A, init_rng, cfg.critic_hidden, cfg.tau, cfg.hidden_act)
    actor_opt = nn.Adam(actor.eps_net.params, cfg.lr_actor)
    critic_opt = nn.Adam(critics.online_params, cfg.lr_critic)
    buf = ReplayBuffer(cfg.capacity, S, A)

    env_rng = stream(cfg.seed, "scenarios")
    explore_rng = stream(cfg.seed, "explore")
    batch_rng = stream(cfg.seed, "batch")
    evals = eval_scenarios(cfg)
    curve = LearningCurve()

    for t in range(cfg.total_steps):
        sc = sample_scenario(env_rng, cfg.sampler)
        s = encode_state(sc)
        raw = dp.sample_action(actor, s, explore_rng, "stochastic")
        raw = np.clip(raw + cfg.explore_std(t) * explore_rng.standard_normal(A),
                      -dp.ACTION_CLAMP, dp.ACTION_CLAMP)
        rep = collect(sc, raw)
        _check_finite(rep.reward, "reward", t)
        buf.push(s, raw, rep.reward)

        if t >= cfg.warmup_steps:
            bs, ba, br = buf.sample(batch_rng, cfg.batch_size)
            critic_opt.zero_grad()
            closs = critic_loss(critics, bs, ba, br)
            _check_finite(closs.data, "critic loss", t)
            nn.backward(closs)
            critic_opt.step()

            actor_opt.zero_grad()
            aloss = dp.actor_loss(actor, critics, bs, batch_rng)
            _check_finite(aloss.data, "actor loss", t)
            nn.backward(aloss)
            actor_opt.step()

            soft_update(critics)

        if (t + 1) % cfg.eval_every == 0:
            mean, _ = evaluate_policy(actor, evals, cfg.seed)
            _check_finite(mean, "evaluation reward", t)
            curve.append(t + 1, mean)
            if progress:
                progress(t + 1, mean)
            log.debug("codi step %d eval %.4f", t + 1, mean)

    _, reports = evaluate_policy(actor, evals, cfg.seed)
    return TrainResult(actor, critics, curve, evals, reports)
