"""Allocation problem instances, the QoE model and constraint handling.

A :class:`Scenario` fixes the budgets and per-user QoE thresholds of one edge
server decision round.  A :class:`Decision` assigns every user a resolution
ratio (which scales the delivered bitrate) and a service-side diffusion step
(which sets the similarity of the regenerated video and its compute cost).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, InfeasibleError

R_MIN = 0.1
STATE_LAYOUT_VERSION = 1

# Relative slack when comparing resource usage against a budget; absorbs the
# rounding of sums such as 0.1 + 0.2 without admitting real overuse.
BUDGET_RTOL = 1e-9


@dataclass(frozen=True)
class Scenario:
    num_users: int
    bandwidth_budget: float
    compute_budget: float
    qoe_threshold: tuple
    weight_bitrate: float = 0.5
    weight_similarity: float = 0.5
    max_bitrate: float = 10.0
    ref_bitrate: float = 10.0
    similarity_floor: float = 0.2
    similarity_ceiling: float = 1.0
    max_diffusion_step: int = 10
    step_compute_cost: float = 1.0
    penalty_coeff: float = 10.0
    preset_meta: Optional[tuple] = None
    # (bandwidth, compute) normalisers used by encode_state; None means the
    # scenario's own budgets.
    state_norm: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "qoe_threshold", tuple(float(t) for t in self.qoe_threshold))
        if self.state_norm is not None:
            object.__setattr__(self, "state_norm", tuple(float(v) for v in self.state_norm))
        if self.preset_meta is not None:
            object.__setattr__(self, "preset_meta", tuple(float(v) for v in self.preset_meta))
        validate_scenario(self)

    @property
    def thresholds(self):
        return np.asarray(self.qoe_threshold, dtype=np.float64)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def validate_scenario(sc):
    if int(sc.num_users) != sc.num_users or sc.num_users < 1:
        raise ConfigError(f"num_users must be a positive integer, got {sc.num_users!r}")
    if len(sc.qoe_threshold) != sc.num_users:
        raise ConfigError(
            f"qoe_threshold has {len(sc.qoe_threshold)} entries for {sc.num_users} users"
        )
    for t in sc.qoe_threshold:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"qoe_threshold entries must lie in [0, 1], got {t}")
    for name in ("weight_bitrate", "weight_similarity"):
        v = getattr(sc, name)
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {v}")
    if abs(sc.weight_bitrate + sc.weight_similarity - 1.0) > 1e-12:
        raise ConfigError("weight_bitrate + weight_similarity must equal 1")
    for name in ("bandwidth_budget", "compute_budget", "max_bitrate", "ref_bitrate",
                 "step_compute_cost"):
        v = getattr(sc, name)
        if not (np.isfinite(v) and v > 0):
            raise ConfigError(f"{name} must be strictly positive, got {v}")
    if int(sc.max_diffusion_step) != sc.max_diffusion_step or sc.max_diffusion_step < 1:
        raise ConfigError(f"max_diffusion_step must be a positive integer, got {sc.max_diffusion_step}")
    if not (0.0 <= sc.similarity_floor < sc.similarity_ceiling <= 1.0):
        raise ConfigError("need 0 <= similarity_floor < similarity_ceiling <= 1")
    if sc.penalty_coeff < 0:
        raise ConfigError(f"penalty_coeff must be >= 0, got {sc.penalty_coeff}")
    if sc.state_norm is not None and (len(sc.state_norm) != 2 or min(sc.state_norm) <= 0):
        raise ConfigError("state_norm must be a pair of positive normalisers")
    if sc.preset_meta is not None and len(sc.preset_meta) != 2:
        raise ConfigError("preset_meta must be a (latency_ms, reliability) pair")


@dataclass(frozen=True)
class Decision:
    resolution_ratio: np.ndarray
    diffusion_step: np.ndarray

    def __post_init__(self):
        r = np.array(self.resolution_ratio, dtype=np.float64).reshape(-1)
        d = np.array(self.diffusion_step, dtype=np.int64).reshape(-1)
        r.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "resolution_ratio", r)
        object.__setattr__(self, "diffusion_step", d)

    @property
    def num_users(self):
        return self.resolution_ratio.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Decision):
            return NotImplemented
        return (np.array_equal(self.resolution_ratio, other.resolution_ratio)
                and np.array_equal(self.diffusion_step, other.diffusion_step))

    def __hash__(self):
        return hash((self.resolution_ratio.tobytes(), self.diffusion_step.tobytes()))

    def key(self):
        """Sort key for the lexicographic tie rule: all ratios, then all steps."""
        return tuple(self.resolution_ratio.tolist()) + tuple(self.diffusion_step.tolist())


@dataclass
class QoEReport:
    per_user_bitrate: np.ndarray
    per_user_similarity: np.ndarray
    per_user_qoe: np.ndarray
    threshold_met: np.ndarray
    bandwidth_used: float
    bandwidth_feasible: bool
    compute_used: float
    compute_feasible: bool
    total_qoe: float
    penalty: float
    reward: float

    @property
    def feasible(self):
        return self.bandwidth_feasible and self.compute_feasible


def _check_ratio(r, sc=None):
    r = np.asarray(r, dtype=np.float64)
    if np.any(~np.isfinite(r)) or np.any(r < R_MIN - 1e-12) or np.any(r > 1.0 + 1e-12):
        raise DomainError(f"resolution ratio must lie in [{R_MIN}, 1], got {r}")
    return r


def _check_step(d, sc):
    d_arr = np.asarray(d)
    if np.any(d_arr != np.round(d_arr)):
        raise DomainError(f"diffusion step must be an integer, got {d}")
    d_arr = d_arr.astype(np.int64)
    if np.any(d_arr < 1) or np.any(d_arr > sc.max_diffusion_step):
        raise DomainError(f"diffusion step must lie in 1..{sc.max_diffusion_step}, got {d}")
    return d_arr


def bitrate(r, sc):
    """Delivered bitrate (Mbit/s) at resolution ratio ``r``; works elementwise."""
    out = sc.max_bitrate * _check_ratio(r)
    return float(out) if out.ndim == 0 else out


def similarity(d, sc):
    """Similarity of the regenerated stream after ``d`` denoising steps."""
    d = _check_step(d, sc)
    out = sc.similarity_floor + (sc.similarity_ceiling - sc.similarity_floor) * d / sc.max_diffusion_step
    return float(out) if np.ndim(out) == 0 else out


def user_qoe(r, d, sc):
    b = np.minimum(np.asarray(bitrate(r, sc)) / sc.ref_bitrate, 1.0)
    out = sc.weight_bitrate * b + sc.weight_similarity * np.asarray(similarity(d, sc))
    return float(out) if np.ndim(out) == 0 else out


def _overuse(used, budget):
    over = used - budget
    return over if over > BUDGET_RTOL * budget else 0.0


def evaluate(sc: Scenario, decision: Decision) -> QoEReport:
    if decision.num_users != sc.num_users or decision.diffusion_step.shape[0] != sc.num_users:
        raise ContractError(
            f"decision has {decision.num_users} ratios / {decision.diffusion_step.shape[0]} steps "
            f"for {sc.num_users} users"
        )
    rates = np.asarray(bitrate(decision.resolution_ratio, sc), dtype=np.float64)
    sims = np.asarray(similarity(decision.diffusion_step, sc), dtype=np.float64)
    qoe = sc.weight_bitrate * np.minimum(rates / sc.ref_bitrate, 1.0) + sc.weight_similarity * sims
    theta = sc.thresholds
    bw_used = float(rates.sum())
    comp_used = float(sc.step_compute_cost * decision.diffusion_step.sum())
    bw_over = _overuse(bw_used, sc.bandwidth_budget)
    comp_over = _overuse(comp_used, sc.compute_budget)
    shortfall = np.maximum(0.0, theta - qoe)
    penalty = sc.penalty_coeff * (
        bw_over / sc.bandwidth_budget + comp_over / sc.compute_budget + float(shortfall.sum())
    )
    total = float(qoe.sum())
    return QoEReport(
        per_user_bitrate=rates,
        per_user_similarity=sims,
        per_user_qoe=qoe,
        threshold_met=qoe >= theta,
        bandwidth_used=bw_used,
        bandwidth_feasible=bw_over == 0.0,
        compute_used=comp_used,
        compute_feasible=comp_over == 0.0,
        total_qoe=total,
        penalty=float(penalty),
        reward=total - float(penalty),
    )


def check_projectable(sc):
    """Raise InfeasibleError if even the all-minimum decision breaks a budget."""
    floor_bw = sc.num_users * sc.max_bitrate * R_MIN
    if floor_bw > sc.bandwidth_budget * (1 + BUDGET_RTOL):
        raise InfeasibleError(
            "bandwidth",
            f"bandwidth budget {sc.bandwidth_budget} is below the minimum demand {floor_bw}",
        )
    floor_comp = sc.num_users * sc.step_compute_cost
    if floor_comp > sc.compute_budget * (1 + BUDGET_RTOL):
        raise InfeasibleError(
            "compute",
            f"compute budget {sc.compute_budget} is below the minimum demand {floor_comp}",
        )


def project_feasible(sc: Scenario, decision: Decision) -> Decision:
    """Repair ``decision`` so both resource budgets hold.

    Bandwidth: ratios are scaled by ``budget / used`` and clamped to
    ``[R_MIN, 1]``; users pinned at ``R_MIN`` drop out and the remaining users
    are rescaled against what is left, so the budget holds after clamping.

    Compute: one step at a time is taken from the user with the largest
    diffusion step (ties go to the highest index) until the budget holds.
    Thresholds are soft and are not projected.
    """
    if decision.num_users != sc.num_users:
        raise ContractError(f"decision has {decision.num_users} users, scenario {sc.num_users}")
    check_projectable(sc)
    r = _check_ratio(decision.resolution_ratio).copy()
    r = np.clip(r, R_MIN, 1.0)
    d = _check_step(decision.diffusion_step, sc).copy()

    used = float((sc.max_bitrate * r).sum())
    if _overuse(used, sc.bandwidth_budget) > 0.0:
        pinned = np.zeros(sc.num_users, dtype=bool)
        for _ in range(sc.num_users + 1):
            pinned_bw = sc.max_bitrate * R_MIN * pinned.sum()
            free_used = float((sc.max_bitrate * r[~pinned]).sum())
            if free_used <= 0.0:
                break
            scale = (sc.bandwidth_budget - pinned_bw) / free_used
            if scale >= 1.0:
                break
            r[~pinned] = np.clip(r[~pinned] * scale, R_MIN, 1.0)
            newly = (~pinned) & (r <= R_MIN)
            if not newly.any():
                break
            pinned |= newly

    c = sc.step_compute_cost
    excess = float(c * d.sum()) - sc.compute_budget
    if excess > BUDGET_RTOL * sc.compute_budget:
        n_cut = int(np.ceil(excess / c - 1e-9))
        for _ in range(n_cut):
            # highest d, ties to the largest index
            i = sc.num_users - 1 - int(np.argmax(d[::-1]))
            d[i] -= 1
    return Decision(r, d)


def encode_state(sc: Scenario) -> np.ndarray:
    """Fixed-layout state vector ``[B/B_norm, C/C_norm, theta_1..theta_N]``.

    Normalisers come from ``sc.state_norm``, which the sampler sets to the
    upper bounds of its budget ranges.
    """
    b_norm, c_norm = sc.state_norm if sc.state_norm is not None else (
        sc.bandwidth_budget, sc.compute_budget)
    out = np.empty(2 + sc.num_users, dtype=np.float64)
    out[0] = sc.bandwidth_budget / b_norm
    out[1] = sc.compute_budget / c_norm
    out[2:] = sc.thresholds
    return out


def state_dim(num_users):
    return 2 + num_users


@dataclass(frozen=True)
class SamplerConfig:
    """Uniform ranges for the per-round budgets and thresholds.

    ``base`` supplies the user count and every model constant; its budgets and
    thresholds are overwritten by each draw.
    """
    base: Scenario
    bandwidth_range: tuple
    compute_range: tuple
    threshold_range: tuple = (0.3, 0.7)

    def __post_init__(self):
        for name in ("bandwidth_range", "compute_range", "threshold_range"):
            rng = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, rng)
            if len(rng) != 2 or not all(np.isfinite(rng)):
                raise ConfigError(f"{name} must be a finite (low, high) pair")
            if rng[0] > rng[1]:
                raise ConfigError(f"{name} is inverted: {rng}")
        if self.bandwidth_range[0] <= 0 or self.compute_range[0] <= 0:
            raise ConfigError("budget ranges must be strictly positive")
        if self.threshold_range[0] < 0 or self.threshold_range[1] > 1:
            raise ConfigError("threshold_range must lie within [0, 1]")

    @property
    def num_users(self):
        return self.base.num_users

    @property
    def state_norm(self):
        return (self.bandwidth_range[1], self.compute_range[1])


def sample_scenario(rng: np.random.Generator, cfg: SamplerConfig) -> Scenario:
    lo_b, hi_b = cfg.bandwidth_range
    lo_c, hi_c = cfg.compute_range
    lo_t, hi_t = cfg.threshold_range
    bw = float(rng.uniform(lo_b, hi_b))
    comp = float(rng.uniform(lo_c, hi_c))
    theta = rng.uniform(lo_t, hi_t, size=cfg.num_users)
    return dataclasses.replace(
        cfg.base,
        bandwidth_budget=bw,
        compute_budget=comp,
        qoe_threshold=tuple(theta.tolist()),
        state_norm=cfg.state_norm,
    )


def default_sampler(num_users=4, **overrides) -> SamplerConfig:
    """Sampler used by the experiments: per-user budget share between 30% and
    80% of the full-quality demand, thresholds in [0.3, 0.7]."""
    base = preset_scenario("default").replace(
        num_users=num_users, qoe_threshold=(0.5,) * num_users,
        bandwidth_budget=4.0 * num_users, compute_budget=4.0 * num_users,
    )
    base = base.replace(**{k: v for k, v in overrides.items() if k in _SCENARIO_KEYS})
    ranges = {k: v for k, v in overrides.items() if k not in _SCENARIO_KEYS}
    demand_bw = base.max_bitrate * base.num_users
    demand_c = base.step_compute_cost * base.max_diffusion_step * base.num_users
    kw = dict(
        bandwidth_range=(0.3 * demand_bw, 0.8 * demand_bw),
        compute_range=(0.3 * demand_c, 0.8 * demand_c),
        threshold_range=(0.3, 0.7),
    )
    kw.update(ranges)
    return SamplerConfig(base=base, **kw)


# name -> (scenario kwargs, preset_meta)
_PRESETS = {
    # end-to-end latency < 1 ms, reliability > 99.999999 %
    "surgery": dict(num_users=4, bandwidth_budget=30.0, compute_budget=30.0,
                    qoe_threshold=(0.6,) * 4, preset_meta=(1.0, 0.99999999)),
    # video air latency 0.5-2 ms, reliability > 99.999 %
    "outpatient": dict(num_users=4, bandwidth_budget=30.0, compute_budget=30.0,
                       qoe_threshold=(0.5,) * 4, preset_meta=(2.0, 0.99999)),
    "default": dict(num_users=4, bandwidth_budget=40.0, compute_budget=40.0,
                    qoe_threshold=(0.5,) * 4, preset_meta=None),
    # budgets far above any demand, no thresholds
    "unconstrained": dict(num_users=1, bandwidth_budget=1e6, compute_budget=1e6,
                          qoe_threshold=(0.0,), preset_meta=None),
}


def preset_names():
    return sorted(_PRESETS)


def preset_scenario(name: str) -> Scenario:
    """Named scenarios.

    ``surgery`` and ``outpatient`` carry (latency budget in ms, reliability
    target) metadata; it is descriptive only and never enters the objective.
    ``default`` has N=4, budgets 40/40, thresholds 0.5 and T_max=10.
    ``unconstrained`` is a single user whose budgets never bind.
    """
    try:
        kw = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {preset_names()}") from None
    return Scenario(**kw)


_SCENARIO_KEYS = {f.name for f in dataclasses.fields(Scenario)}


def scenario_from_dict(d: dict) -> Scenario:
    """Build a scenario from a config mapping; ``preset`` may name a base."""
    d = dict(d)
    base = preset_scenario(d.pop("preset")) if "preset" in d else None
    unknown = set(d) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if base is None:
        return Scenario(**d)
    if "num_users" in d and "qoe_threshold" not in d:
        d["qoe_threshold"] = (base.qoe_threshold[0],) * int(d["num_users"])
    return base.replace(**d)


def scenario_to_dict(sc: Scenario) -> dict:
    out = dataclasses.asdict(sc)
    for k in ("qoe_threshold", "preset_meta", "state_norm"):
        if out[k] is not None:
            out[k] = list(out[k])
    return out


def unconstrained(num_users=1, **kw) -> Scenario:
    """Scenario whose budgets admit the all-maximum decision."""
    base = dict(num_users=num_users, bandwidth_budget=1e6, compute_budget=1e6,
                qoe_threshold=(0.0,) * num_users)
    base.update(kw)
    return Scenario(**base)


def validate_decision(sc: Scenario, decision: Decision):
    if decision.num_users != sc.num_users or decision.diffusion_step.shape[0] != sc.num_users:
        raise ContractError("decision dimensions do not match the scenario")
    _check_ratio(decision.resolution_ratio)
    _check_step(decision.diffusion_step, sc)


def decision_from_lists(r: Sequence[float], d: Sequence[int]) -> Decision:
    return Decision(np.asarray(r, dtype=np.float64), np.asarray(d, dtype=np.int64))
