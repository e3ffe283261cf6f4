"""Central finite-difference checks of the reverse-mode gradients.

Each check builds a scalar loss from a fixed random draw, takes the analytic
gradient with :func:`tensor_nn.backward`, and compares every parameter entry
against ``(L(p + h) - L(p - h)) / 2h``.
"""

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import diffusion_policy as dp
from . import tensor_nn as nn
from .critic_trainer import critic_loss, critic_pair_new

FD_STEP = 1e-5
REL_TOL = 1e-4
# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    n_entries: int

    @property
    def passed(self):
        return self.max_rel_err <= REL_TOL

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max relative error {self.max_rel_err:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} ({self.n_entries} entries)")


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), GRAD_FLOOR)


def check(name, loss_fn: Callable[[], nn.Tensor], params: List[nn.Tensor], labels: List[str],
          h=FD_STEP) -> CheckResult:
    for p in params:
        p.grad = None
    nn.backward(loss_fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = (0.0, labels[0], ())
    count = 0
    for p, g, label in zip(params, analytic, labels):
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_fn().item()
            p.data[idx] = orig - h
            down = loss_fn().item()
            p.data[idx] = orig
            numeric = (up - down) / (2 * h)
            e = float(rel_err(g[idx], numeric))
            count += 1
            if e > worst[0]:
                worst = (e, label, idx)
    for p in params:
        p.grad = None
    return CheckResult(name, worst[0], worst[1], worst[2], count)


def mlp_labels(mlp, prefix="mlp"):
    out = []
    for layer in range(mlp.n_layers):
        out += [f"{prefix}.layer{layer}.W", f"{prefix}.layer{layer}.b"]
    return out


def _op_checks(rng):
    results = []
    x = nn.Tensor(rng.normal(size=(3, 4)), True)
    y = nn.Tensor(rng.normal(size=(3, 4)), True)
    pos = nn.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), True)
    row = nn.Tensor(rng.normal(size=(4,)), True)
    W = nn.Tensor(rng.normal(size=(4, 2)), True)
    b = nn.Tensor(rng.normal(size=(2,)), True)
    wts = rng.normal(size=(3, 4))
    out_wts = rng.normal(size=(3, 2))

    def weighted(t):
        return nn.sum(t * wts)

    cases = {
        "add": (lambda: weighted(x + row), [x, row]),
        "sub": (lambda: weighted(x - y), [x, y]),
        "mul": (lambda: weighted(x * y), [x, y]),
        "affine": (lambda: nn.sum(nn.affine(x, W, b) * out_wts), [x, W, b]),
        "tanh": (lambda: weighted(nn.tanh(x)), [x]),
        "relu": (lambda: weighted(nn.relu(x)), [x]),
        "exp": (lambda: weighted(nn.exp(x)), [x]),
        "log": (lambda: weighted(nn.log(pos)), [pos]),
        "square": (lambda: weighted(nn.square(x)), [x]),
        "clip": (lambda: weighted(nn.clip(x, -0.5, 0.5)), [x]),
        "minimum": (lambda: weighted(nn.minimum(x, y)), [x, y]),
        "mean": (lambda: nn.sum(nn.mean(x * y, axis=1) * wts[:, 0]) + nn.mean(x), [x, y]),
        "mse": (lambda: nn.mse(x, wts), [x]),
        "concat": (lambda: nn.sum(nn.concat([x, y], axis=1) * np.tile(wts, 2)), [x, y]),
    }
    for name, (fn, params) in cases.items():
        labels = [f"{name}.arg{i}" for i in range(len(params))]
        results.append(check(f"op:{name}", fn, params, labels))
    return results


def _mlp_check(rng, sizes, hidden_act, name):
    mlp = nn.mlp_init(sizes, rng, hidden_act=hidden_act)
    for p in mlp.params[1::2]:
        p.data[:] = rng.normal(scale=0.1, size=p.data.shape)
    x = rng.normal(size=(5, sizes[0]))
    target = rng.normal(size=(5, sizes[-1]))
    return check(name, lambda: nn.mse(nn.forward(mlp, x), target), mlp.params, mlp_labels(mlp))


def _chain_check(rng, K=2, hidden=(2,), num_users=1):
    actor = dp.actor_new(num_users, rng, K=K, beta_start=0.05, beta_end=0.2, hidden=hidden,
                         hidden_act="tanh")
    critics = critic_pair_new(actor.state_dim + actor.action_dim, rng, hidden=(8,),
                              hidden_act="tanh")
    states = rng.uniform(0, 1, size=(4, actor.state_dim))
    a_K = rng.normal(scale=0.5, size=(4, actor.action_dim))
    return check(f"diffusion chain K={K}",
                 lambda: dp.actor_loss(actor, critics, states, a_K=a_K),
                 actor.eps_net.params, mlp_labels(actor.eps_net, "eps_net"))


def _critic_check(rng):
    critics = critic_pair_new(5, rng, hidden=(6, 6), hidden_act="tanh")
    s = rng.normal(size=(6, 3))
    a = rng.normal(size=(6, 2))
    r = rng.normal(size=6)
    return check("critic loss", lambda: critic_loss(critics, s, a, r),
                 critics.online_params, mlp_labels(critics.q1, "q1") + mlp_labels(critics.q2, "q2"))


def run_all(seed=0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = _op_checks(rng)
    results.append(_mlp_check(rng, [4, 8, 3], "tanh", "mlp 2-layer tanh"))
    results.append(_mlp_check(rng, [5, 16, 16, 2], "tanh", "mlp 3-layer tanh"))
    results.append(_mlp_check(rng, [6, 32, 64, 3], "relu", "mlp 3-layer relu"))
    results.append(_critic_check(rng))
    results.append(_chain_check(rng))
    return results
