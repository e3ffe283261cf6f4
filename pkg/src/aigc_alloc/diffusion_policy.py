"""Conditional diffusion actor.

The actor starts from a standard Gaussian draw in raw-action space (two
coordinates per user) and runs a short DDPM reverse chain whose noise
predictor is conditioned on the encoded scenario state.  Raw actions are
mapped to allocations by :func:`decode_decision`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import tensor_nn as nn
from .errors import ConfigError, ContractError
from .scenario import R_MIN, Decision, Scenario, state_dim

ACTION_CLAMP = 3.0
EMBED_DIM = 16
MAX_CHAIN = 64


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, k):
        return float(self.betas[k - 1])

    def alpha(self, k):
        return float(self.alphas[k - 1])

    def alpha_bar(self, k):
        return float(self.alpha_bars[k - 1])


def schedule_new(K: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over ``K`` steps (indexed 1..K)."""
    if int(K) != K or K < 1:
        raise ConfigError(f"chain length K must be a positive integer, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, int(K))
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.flags.writeable = False
    return NoiseSchedule(int(K), float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def forward_noising(a0, k, eps, schedule: NoiseSchedule):
    """Closed-form q(a_k | a_0): ``sqrt(abar_k) a0 + sqrt(1 - abar_k) eps``."""
    if not 1 <= k <= schedule.K:
        raise ContractError(f"step k={k} outside 1..{schedule.K}")
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != eps.shape:
        raise ContractError(f"action shape {a0.shape} != noise shape {eps.shape}")
    ab = schedule.alpha_bar(k)
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def step_embedding(k, dim=EMBED_DIM):
    """Sinusoidal embedding of the chain index ``k``."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(k) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class DiffusionActor:
    eps_net: nn.Mlp
    schedule: NoiseSchedule
    num_users: int
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        want_in = state_dim(self.num_users) + self.action_dim + self.embed_dim
        if self.eps_net.sizes[0] != want_in or self.eps_net.sizes[-1] != self.action_dim:
            raise ContractError(
                f"eps_net sizes {self.eps_net.sizes} do not fit N={self.num_users} "
                f"(input {want_in}, output {self.action_dim})"
            )
        self._emb = np.stack([step_embedding(k, self.embed_dim)
                              for k in range(1, self.schedule.K + 1)])

    @property
    def action_dim(self):
        return 2 * self.num_users

    @property
    def state_dim(self):
        return state_dim(self.num_users)

    def embedding(self, k):
        return self._emb[k - 1]

    def copy(self):
        return DiffusionActor(self.eps_net.copy(), self.schedule, self.num_users, self.embed_dim)


def actor_new(num_users, rng, K=5, beta_start=1e-4, beta_end=0.1, hidden=(128, 128),
              hidden_act="relu") -> DiffusionActor:
    if K > MAX_CHAIN:
        raise ConfigError(f"chain length {K} exceeds the supported maximum {MAX_CHAIN}")
    sched = schedule_new(K, beta_start, beta_end)
    sizes = [state_dim(num_users) + 2 * num_users + EMBED_DIM, *hidden, 2 * num_users]
    return DiffusionActor(nn.mlp_init(sizes, rng, hidden_act=hidden_act), sched, num_users)


def _check_state(actor, state):
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != actor.state_dim:
        raise ContractError(f"state width {state.shape[-1]} != {actor.state_dim} for "
                            f"N={actor.num_users}")
    return state


def _chain_coefs(sched, k):
    beta = sched.beta(k)
    return beta / np.sqrt(1.0 - sched.alpha_bar(k)), 1.0 / np.sqrt(sched.alpha(k)), np.sqrt(beta)


def sample_action(actor: DiffusionActor, state, rng=None, mode="deterministic", a_K=None):
    """Run the reverse chain from ``a_K`` (drawn from ``rng`` if omitted).

    ``state`` may be a single vector or a batch.  In ``stochastic`` mode each
    step adds ``sqrt(beta_k) * z``; ``deterministic`` mode adds nothing.
    The result is clamped to ``[-3, 3]`` per coordinate.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    state = _check_state(actor, state)
    single = state.ndim == 1
    S = state.reshape(-1, actor.state_dim)
    B = S.shape[0]
    if a_K is None:
        a = rng.standard_normal((B, actor.action_dim))
    else:
        a = np.array(a_K, dtype=np.float64).reshape(B, actor.action_dim)
    sched = actor.schedule
    for k in range(sched.K, 0, -1):
        emb = np.broadcast_to(actor.embedding(k), (B, actor.embed_dim))
        eps_hat = nn.predict(actor.eps_net, np.concatenate([S, a, emb], axis=1))
        c_eps, c_scale, sigma = _chain_coefs(sched, k)
        a = (a - c_eps * eps_hat) * c_scale
        if mode == "stochastic":
            a = a + sigma * rng.standard_normal(a.shape)
    a = np.clip(a, -ACTION_CLAMP, ACTION_CLAMP)
    return a[0] if single else a


def chain_graph(actor: DiffusionActor, states, a_K) -> nn.Tensor:
    """Deterministic reverse chain as a differentiable graph.

    Gradients reach the eps_net parameters through every denoising step.
    """
    S = nn.Tensor(_check_state(actor, states).reshape(-1, actor.state_dim))
    B = S.shape[0]
    a = nn.as_tensor(np.asarray(a_K, dtype=np.float64).reshape(B, actor.action_dim))
    sched = actor.schedule
    for k in range(sched.K, 0, -1):
        emb = nn.Tensor(np.broadcast_to(actor.embedding(k), (B, actor.embed_dim)))
        eps_hat = nn.forward(actor.eps_net, nn.concat([S, a, emb], axis=1))
        c_eps, c_scale, _ = _chain_coefs(sched, k)
        a = (a - eps_hat * c_eps) * c_scale
    return nn.clip(a, -ACTION_CLAMP, ACTION_CLAMP)


def actor_loss(actor: DiffusionActor, critics, states, rng=None, a_K=None) -> nn.Tensor:
    """``-mean(min(Q1, Q2))`` at the chain output; critics are held frozen.

    ``critics`` is anything with ``q1``/``q2`` MLPs taking ``state || action``.
    """
    if actor.schedule.K > MAX_CHAIN:
        raise ConfigError(f"chain length {actor.schedule.K} exceeds {MAX_CHAIN}")
    states = np.asarray(states, dtype=np.float64).reshape(-1, actor.state_dim)
    if a_K is None:
        a_K = rng.standard_normal((states.shape[0], actor.action_dim))
    a0 = chain_graph(actor, states, a_K)
    sa = nn.concat([nn.Tensor(states), a0], axis=1)
    q = nn.minimum(nn.forward(critics.q1, sa, frozen=True), nn.forward(critics.q2, sa, frozen=True))
    return -nn.mean(q)


def decode_raw(raw, num_users, max_step):
    """Vectorised decode: returns (ratios, steps) for raw actions of shape (..., 2N)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 2 * num_users:
        raise ContractError(f"raw action width {raw.shape[-1]} != {2 * num_users}")
    u = (np.tanh(raw) + 1.0) * 0.5
    r = R_MIN + u[..., :num_users] * (1.0 - R_MIN)
    d_cont = 1.0 + u[..., num_users:] * (max_step - 1)
    d = np.floor(d_cont + 0.5).astype(np.int64)
    # tanh saturates to exactly +-1 for large |raw|; keep bounds exact
    r = np.clip(r, R_MIN, 1.0)
    d = np.clip(d, 1, max_step)
    return r, d


def decode_decision(raw, sc: Scenario) -> Decision:
    r, d = decode_raw(raw, sc.num_users, sc.max_diffusion_step)
    return Decision(r, d)


# --------------------------------------------------------------------------
# checkpoints: one schedule line, then an MLPCKPT v1 block
# --------------------------------------------------------------------------

def actor_to_text(actor: DiffusionActor) -> str:
    s = actor.schedule
    head = f"schedule {s.K} {s.beta_start!r} {s.beta_end!r}\n"
    return head + nn.mlp_to_text(actor.eps_net)


def actor_from_text(text: str) -> DiffusionActor:
    fh = io.StringIO(text)
    tag, K, b0, b1 = fh.readline().split()
    if tag != "schedule":
        raise ConfigError("actor checkpoint must start with a schedule line")
    mlp = nn._read_mlp(fh)
    sched = schedule_new(int(K), float(b0), float(b1))
    n = mlp.sizes[-1] // 2
    return DiffusionActor(mlp, sched, n)


def save_actor(actor, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(actor_to_text(actor))


def load_actor(path) -> DiffusionActor:
    with open(path) as fh:
        return actor_from_text(fh.read())
