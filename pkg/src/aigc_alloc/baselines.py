"""Reference solvers: exhaustive oracle, knapsack oracle, greedy, random,
and single-step SAC / PPO variants sharing the CODI training protocol."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffusion_policy as dp
from . import kernels
from . import tensor_nn as nn
from .critic_trainer import (LearningCurve, ReplayBuffer, TrainConfig, TrainingDiverged, collect,
                             critic_loss, critic_pair_new, eval_scenarios, evaluate_actions,
                             soft_update)
from .errors import CapacityError, ConfigError, InfeasibleError
from .scenario import (BUDGET_RTOL, R_MIN, Decision, Scenario, encode_state, evaluate,
                       project_feasible, sample_scenario, state_dim)
from .seeding import stream

MAX_GRID_POINTS = 10 ** 7
DEFAULT_R_STEP = 0.1


def default_r_levels(step=DEFAULT_R_STEP):
    n = int(round(1.0 / step))
    levels = np.round(np.arange(1, n + 1) * step, 12)
    return levels[levels >= R_MIN - 1e-12]


@dataclass
class OracleResult:
    decision: Decision
    total_qoe: float
    reward: float
    n_evaluated: int
    n_feasible: int
    ties: Optional[int]


def value_table(sc: Scenario, r_levels):
    """``value[i, a, b]`` = QoE_i - lambda * shortfall_i at (r_levels[a], b + 1)."""
    r = np.asarray(r_levels, dtype=np.float64)
    d = np.arange(1, sc.max_diffusion_step + 1)
    b_term = sc.weight_bitrate * np.minimum(sc.max_bitrate * r / sc.ref_bitrate, 1.0)
    s_term = sc.weight_similarity * (
        sc.similarity_floor + (sc.similarity_ceiling - sc.similarity_floor) * d / sc.max_diffusion_step)
    qoe = b_term[:, None] + s_term[None, :]
    theta = sc.thresholds[:, None, None]
    return np.ascontiguousarray(qoe[None] - sc.penalty_coeff * np.maximum(0.0, theta - qoe[None]))


def _caps(sc):
    return (sc.bandwidth_budget * (1.0 + BUDGET_RTOL), sc.compute_budget * (1.0 + BUDGET_RTOL))


def oracle_grid_search(sc: Scenario, r_levels=None, max_points=MAX_GRID_POINTS,
                       threads=1) -> OracleResult:
    """Enumerate every grid decision, keep resource-feasible ones, maximise reward.

    Ties (within ``kernels.TIE_TOL``) go to the lexicographically smallest
    ``(r_1..r_N, d_1..d_N)``.  The lead user's ratio levels are split across
    ``threads`` workers; the reduction is independent of the split.
    """
    r_levels = default_r_levels() if r_levels is None else np.sort(np.asarray(r_levels, float))
    if r_levels.size == 0 or r_levels[0] < R_MIN - 1e-12 or r_levels[-1] > 1 + 1e-12:
        raise ConfigError(f"r_levels must be non-empty and inside [{R_MIN}, 1]")
    R, T, N = r_levels.size, sc.max_diffusion_step, sc.num_users
    n_points = (R * T) ** N
    if n_points > max_points:
        raise CapacityError(
            f"grid has ({R} ratio levels x {T} steps)^{N} = {n_points} points, "
            f"above the bound {max_points}"
        )
    value = value_table(sc, r_levels)
    bw_cost = sc.max_bitrate * r_levels
    comp_cost = sc.step_compute_cost * np.arange(1, T + 1, dtype=np.float64)
    bw_cap, comp_cap = _caps(sc)

    bounds = np.linspace(0, R, max(1, min(int(threads), R)) + 1).astype(int)
    parts = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    args = (value, bw_cost, comp_cost, bw_cap, comp_cap)

    def pmap(fn):
        if len(parts) == 1:
            return [fn(*parts[0])]
        with ThreadPoolExecutor(max_workers=len(parts)) as ex:
            return list(ex.map(lambda p: fn(*p), parts))

    firsts = pmap(lambda lo, hi: kernels.grid_max(*args, int(lo), int(hi)))
    best = max(b for b, _ in firsts)
    n_feasible = sum(int(n) for _, n in firsts)
    if not np.isfinite(best):
        raise InfeasibleError("bandwidth/compute", "no grid decision satisfies both budgets")
    seconds = pmap(lambda lo, hi: kernels.grid_ties(*args, int(lo), int(hi), best))
    ties = sum(int(k) for _, k in seconds)
    first = next(f for f, k in seconds if k > 0)
    dec = Decision(r_levels[first[:N]], first[N:] + 1)
    rep = evaluate(sc, dec)
    return OracleResult(dec, rep.total_qoe, rep.reward, n_points, n_feasible, ties)


def oracle_dp(sc: Scenario, r_step=DEFAULT_R_STEP) -> OracleResult:
    """Grid optimum via a two-resource knapsack over integer units.

    Same grid and objective as :func:`oracle_grid_search`, but polynomial in
    the user count, so it also covers user counts whose grid is too large to
    enumerate.  The returned decision is *an* optimum; no tie rule is applied.
    """
    r_levels = default_r_levels(r_step)
    value = value_table(sc, r_levels)
    bw_units = np.round(r_levels / r_step).astype(np.int64)
    comp_units = np.arange(1, sc.max_diffusion_step + 1, dtype=np.int64)
    bw_cap = int(np.floor(sc.bandwidth_budget * (1 + BUDGET_RTOL) / (sc.max_bitrate * r_step) + 1e-9))
    comp_cap = int(np.floor(sc.compute_budget * (1 + BUDGET_RTOL) / sc.step_compute_cost + 1e-9))
    bw_cap = min(bw_cap, int(bw_units.max()) * sc.num_users)
    comp_cap = min(comp_cap, sc.max_diffusion_step * sc.num_users)
    best, levels = kernels.knapsack(value, bw_units, comp_units, bw_cap, comp_cap)
    if levels is None:
        raise InfeasibleError("bandwidth/compute", "no grid decision satisfies both budgets")
    dec = Decision(r_levels[levels[:, 0]], levels[:, 1] + 1)
    rep = evaluate(sc, dec)
    n_points = (r_levels.size * sc.max_diffusion_step) ** sc.num_users
    return OracleResult(dec, rep.total_qoe, rep.reward, n_points, -1, None)


def oracle(sc: Scenario, max_points=MAX_GRID_POINTS, threads=1) -> OracleResult:
    """Exhaustive search when tractable, knapsack otherwise."""
    R, T = default_r_levels().size, sc.max_diffusion_step
    if (R * T) ** sc.num_users <= max_points:
        return oracle_grid_search(sc, max_points=max_points, threads=threads)
    return oracle_dp(sc)


def snap_to_grid(decision: Decision, r_step=DEFAULT_R_STEP) -> Decision:
    """Round each ratio down to the oracle grid.

    Rounding down never raises bandwidth use, so a resource-feasible decision
    stays feasible and becomes comparable with the grid optimum.
    """
    r = np.floor(decision.resolution_ratio / r_step + 1e-9) * r_step
    r = np.clip(np.round(r, 12), R_MIN, 1.0)
    return Decision(r, decision.diffusion_step.copy())


def greedy_allocate(sc: Scenario) -> Decision:
    """Everyone at full resolution and maximum steps, then projected."""
    full = Decision(np.ones(sc.num_users), np.full(sc.num_users, sc.max_diffusion_step))
    return project_feasible(sc, full)


def random_policy(sc: Scenario, rng: np.random.Generator) -> Decision:
    r = rng.uniform(R_MIN, 1.0, size=sc.num_users)
    d = rng.integers(1, sc.max_diffusion_step + 1, size=sc.num_users)
    return project_feasible(sc, Decision(r, d))


# --------------------------------------------------------------------------
# conventional actor-critic baselines (single-step episodes)
# --------------------------------------------------------------------------

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class BaselinePolicy:
    """A non-diffusion policy.  ``kind`` is random, greedy, sac or ppo;
    sac/ppo carry ``net`` (and ppo a state-independent ``log_std``)."""
    kind: str
    num_users: int
    net: Optional[nn.Mlp] = None
    log_std: Optional[nn.Tensor] = None
    value_net: Optional[nn.Mlp] = None

    def __post_init__(self):
        needs_net = self.kind in ("sac", "ppo")
        if self.kind not in ("random", "greedy", "sac", "ppo"):
            raise ConfigError(f"unknown baseline kind {self.kind!r}")
        if needs_net != (self.net is not None) or (self.kind == "ppo") != (self.log_std is not None):
            raise ConfigError(f"parameters inconsistent with baseline kind {self.kind!r}")

    def act(self, states):
        """Deterministic raw action (the mean; the std head is ignored)."""
        A = 2 * self.num_users
        out = nn.predict(self.net, states)
        if self.kind == "sac":
            return dp.ACTION_CLAMP * np.tanh(out[..., :A])
        return np.clip(out, -dp.ACTION_CLAMP, dp.ACTION_CLAMP)


def _eval(policy, evals):
    return evaluate_actions(policy.act, evals)


def sac_sample(net: nn.Mlp, states, noise):
    """Reparameterised tanh-Gaussian draw.

    Returns ``(action, log_prob)`` tensors; ``action = 3 tanh(mu + sigma * noise)``.
    """
    A = noise.shape[-1]
    out = nn.forward(net, states)
    mu = _cols(out, 0, A)
    log_std = nn.clip(_cols(out, A, 2 * A), LOG_STD_MIN, LOG_STD_MAX)
    u = mu + nn.exp(log_std) * noise
    y = nn.tanh(u)
    action = y * dp.ACTION_CLAMP
    gauss = nn.sum(nn.add(-log_std, -0.5 * noise * noise - _HALF_LOG_2PI), axis=1)
    # change of variables for a = 3 tanh(u)
    jac = nn.sum(nn.log((1.0 - nn.square(y)) * dp.ACTION_CLAMP + 1e-6), axis=1)
    return action, gauss - jac


def _cols(t: nn.Tensor, lo, hi):
    """Differentiable column slice ``t[:, lo:hi]``."""
    sel = np.zeros((t.shape[-1], hi - lo))
    sel[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
    return nn.affine(t, nn.Tensor(sel), nn.Tensor(np.zeros(hi - lo)))


def sac_actor_loss(net, critics, states, noise, temperature):
    """``mean(alpha * log pi(a|s) - min(Q1, Q2)(s, a))`` with critics frozen."""
    a, logp = sac_sample(net, states, noise)
    sa = nn.concat([nn.Tensor(states), a], axis=1)
    q = nn.minimum(nn.forward(critics.q1, sa, frozen=True), nn.forward(critics.q2, sa, frozen=True))
    return nn.mean(nn.add(logp * temperature, -nn.sum(q, axis=1)))


def _check(v, what, t):
    if not np.all(np.isfinite(v)):
        raise TrainingDiverged(f"non-finite {what} at step {t}: {v}")


def train_sac_lite(cfg: TrainConfig, progress=None):
    """Tanh-Gaussian policy with fixed-temperature entropy bonus and double-Q
    critics regressed onto the reward.  Replay, warmup and evaluation follow
    the CODI loop step for step."""
    cfg.validate()
    N = cfg.num_users
    S, A = state_dim(N), 2 * N
    init_rng = stream(cfg.seed, "init")
    net = nn.mlp_init([S, *cfg.actor_hidden, 2 * A], init_rng, hidden_act=cfg.hidden_act)
    critics = critic_pair_new(S + A, init_rng, cfg.critic_hidden, cfg.tau, cfg.hidden_act)
    pol_opt = nn.Adam(net.params, cfg.lr_actor)
    critic_opt = nn.Adam(critics.online_params, cfg.lr_critic)
    buf = ReplayBuffer(cfg.capacity, S, A)
    env_rng, explore_rng, batch_rng = (stream(cfg.seed, n) for n in ("scenarios", "explore", "batch"))
    policy = BaselinePolicy("sac", N, net)
    evals = eval_scenarios(cfg)
    curve = LearningCurve()

    for t in range(cfg.total_steps):
        sc = sample_scenario(env_rng, cfg.sampler)
        s = encode_state(sc)
        out = nn.predict(net, s)
        log_std = np.clip(out[A:], LOG_STD_MIN, LOG_STD_MAX)
        raw = dp.ACTION_CLAMP * np.tanh(out[:A] + np.exp(log_std) * explore_rng.standard_normal(A))
        rep = collect(sc, raw)
        _check(rep.reward, "reward", t)
        buf.push(s, raw, rep.reward)

        if t >= cfg.warmup_steps:
            bs, ba, br = buf.sample(batch_rng, cfg.batch_size)
            critic_opt.zero_grad()
            closs = critic_loss(critics, bs, ba, br)
            _check(closs.data, "critic loss", t)
            nn.backward(closs)
            critic_opt.step()

            pol_opt.zero_grad()
            ploss = sac_actor_loss(net, critics, bs, batch_rng.standard_normal((len(bs), A)),
                                   cfg.sac_temperature)
            _check(ploss.data, "policy loss", t)
            nn.backward(ploss)
            pol_opt.step()
            soft_update(critics)

        if (t + 1) % cfg.eval_every == 0:
            mean, _ = _eval(policy, evals)
            _check(mean, "evaluation reward", t)
            curve.append(t + 1, mean)
            if progress:
                progress(t + 1, mean)

    _, reports = _eval(policy, evals)
    return policy, curve, critics, evals, reports


def gaussian_log_prob(mu: nn.Tensor, log_std: nn.Tensor, u):
    """Row-wise log N(u; mu, exp(log_std)^2) summed over action dims."""
    z = (nn.Tensor(u) - mu) * nn.exp(-log_std)
    return nn.sum(nn.add(-log_std, -0.5 * nn.square(z) - _HALF_LOG_2PI), axis=1)


def ppo_clipped_objective(ratio: nn.Tensor, adv, clip=0.2):
    """Per-sample ``min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``."""
    adv = np.asarray(adv, dtype=np.float64)
    return nn.minimum(ratio * adv, nn.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def train_ppo_lite(cfg: TrainConfig, progress=None):
    """On-policy clipped-ratio updates over batches of fresh single-step
    episodes.  The advantage is ``reward - V(s)``, normalised per rollout."""
    cfg.validate()
    N = cfg.num_users
    S, A = state_dim(N), 2 * N
    init_rng = stream(cfg.seed, "init")
    net = nn.mlp_init([S, *cfg.actor_hidden, A], init_rng, hidden_act=cfg.hidden_act)
    log_std = nn.Tensor(np.zeros(A), True)
    vnet = nn.mlp_init([S, *cfg.critic_hidden, 1], init_rng, hidden_act=cfg.hidden_act)
    pol_opt = nn.Adam(net.params + [log_std], cfg.ppo_lr)
    v_opt = nn.Adam(vnet.params, cfg.ppo_lr)
    env_rng, explore_rng, batch_rng = (stream(cfg.seed, n) for n in ("scenarios", "explore", "batch"))
    policy = BaselinePolicy("ppo", N, net, log_std, vnet)
    evals = eval_scenarios(cfg)
    curve = LearningCurve()

    R = cfg.ppo_rollout
    roll_s, roll_u, roll_r = np.zeros((R, S)), np.zeros((R, A)), np.zeros(R)
    n = 0
    for t in range(cfg.total_steps):
        sc = sample_scenario(env_rng, cfg.sampler)
        s = encode_state(sc)
        mu = nn.predict(net, s)
        u = mu + np.exp(log_std.data) * explore_rng.standard_normal(A)
        rep = collect(sc, np.clip(u, -dp.ACTION_CLAMP, dp.ACTION_CLAMP))
        _check(rep.reward, "reward", t)
        roll_s[n], roll_u[n], roll_r[n] = s, u, rep.reward
        n += 1

        if n == R:
            _ppo_update(cfg, net, log_std, vnet, pol_opt, v_opt, roll_s, roll_u, roll_r, batch_rng, t)
            n = 0

        if (t + 1) % cfg.eval_every == 0:
            mean, _ = _eval(policy, evals)
            _check(mean, "evaluation reward", t)
            curve.append(t + 1, mean)
            if progress:
                progress(t + 1, mean)

    _, reports = _eval(policy, evals)
    return policy, curve, None, evals, reports


def _ppo_update(cfg, net, log_std, vnet, pol_opt, v_opt, S, U, Rw, rng, t):
    mu_old = nn.predict(net, S)
    z = (U - mu_old) / np.exp(log_std.data)
    logp_old = np.sum(-log_std.data - 0.5 * z * z - _HALF_LOG_2PI, axis=1)
    adv = Rw - nn.predict(vnet, S)[:, 0]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(Rw)
    for _ in range(cfg.ppo_epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.ppo_minibatch):
            idx = perm[lo:lo + cfg.ppo_minibatch]
            pol_opt.zero_grad()
            logp = gaussian_log_prob(nn.forward(net, S[idx]), log_std, U[idx])
            ratio = nn.exp(logp - logp_old[idx])
            loss = -nn.mean(ppo_clipped_objective(ratio, adv[idx], cfg.ppo_clip))
            _check(loss.data, "policy loss", t)
            nn.backward(loss)
            pol_opt.step()

            v_opt.zero_grad()
            vloss = nn.mse(nn.forward(vnet, S[idx]), Rw[idx].reshape(-1, 1))
            _check(vloss.data, "value loss", t)
            nn.backward(vloss)
            v_opt.step()
