"""Small reverse-mode autodiff over float64 numpy arrays, plus MLPs and Adam.

Only the operations the actor and critic losses use are provided.  A
:class:`Tensor` records its parents and a closure that pushes its gradient to
them; :func:`backward` walks the recorded graph in reverse topological order.
Tensors built only from constants carry no graph at all.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ContractError

CKPT_MAGIC = "MLPCKPT v1"
HIDDEN_ACTS = ("tanh", "relu")
OUTPUT_ACTS = ("identity", "tanh")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ContractError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(scalar, dtype=np.float64))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# differentiable operations
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw)


def neg(a):
    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def affine(x, W, b):
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ContractError(f"input width {x.shape[-1]} does not match layer input {W.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = (x2 @ W.data + b.data).reshape(lead + (W.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        if x.requires_grad:
            _accum(x, (g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            _accum(W, x2.T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _node(out, (x, W, b), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _node(y, (a,), bw)


def relu(a):
    mask = a.data > 0.0  # subgradient 0 at 0

    def bw(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), bw)


def exp(a):
    # guarded: clip the exponent so finite inputs stay finite
    y = np.exp(np.minimum(a.data, 700.0))

    def bw(g):
        _accum(a, g * y * (a.data < 700.0))

    return _node(y, (a,), bw)


def log(a):
    x = np.maximum(a.data, 1e-300)

    def bw(g):
        _accum(a, g / x * (a.data > 1e-300))

    return _node(np.log(x), (a,), bw)


def square(a):
    def bw(g):
        _accum(a, 2.0 * g * a.data)

    return _node(a.data * a.data, (a,), bw)


def clip(a, lo, hi):
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        _accum(a, _unbroadcast(g * pick_a, a.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.shape))

    return _node(np.where(pick_a, a.data, b.data), (a, b), bw)


def sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(pred, target):
    """mean((pred - target)^2); ``target`` is a constant."""
    diff = pred.data - np.asarray(target.data if isinstance(target, Tensor) else target)
    n = diff.size

    def bw(g):
        _accum(pred, g * 2.0 * diff / n)

    return _node(np.mean(diff * diff), (pred,), bw)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    widths = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, widths, axis=axis)):
            _accum(p, gp)

    return _node(out, tuple(parts), bw)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior buffers are not needed once their parents have been reached
    for node in order:
        if node._backward is not None:
            node.grad = None


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass
class Mlp:
    sizes: List[int]
    params: List[Tensor]  # W0, b0, W1, b1, ...
    hidden_act: str = "relu"
    out_act: str = "identity"

    @property
    def weights(self):
        return [p.data for p in self.params[0::2]]

    @property
    def biases(self):
        return [p.data for p in self.params[1::2]]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def arrays(self):
        return [p.data for p in self.params]

    def grads(self):
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def copy(self):
        return Mlp(list(self.sizes), [Tensor(p.data.copy(), True) for p in self.params],
                   self.hidden_act, self.out_act)

    def load_arrays(self, arrays):
        for p, a in zip(self.params, arrays):
            if p.data.shape != np.shape(a):
                raise ContractError(f"parameter shape {np.shape(a)} != {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)


def mlp_init(sizes: Sequence[int], rng: np.random.Generator, hidden_act="relu",
             out_act="identity") -> Mlp:
    """Uniform fan-in init, ``W ~ U(-sqrt(3/fan_in), +sqrt(3/fan_in))``, zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ContractError(f"an MLP needs at least two positive layer sizes, got {sizes}")
    if hidden_act not in HIDDEN_ACTS or out_act not in OUTPUT_ACTS:
        raise ConfigError(f"unsupported activations {hidden_act!r}/{out_act!r}")
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(3.0 / fan_in)
        params.append(Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), True))
        params.append(Tensor(np.zeros(fan_out), True))
    return Mlp(sizes, params, hidden_act, out_act)


def forward(mlp: Mlp, x, frozen=False) -> Tensor:
    """Affine-then-activation stack.  ``frozen`` treats the parameters as
    constants: gradients still reach ``x`` but never the weights."""
    x = as_tensor(x)
    if x.shape[-1] != mlp.sizes[0]:
        raise ContractError(f"input width {x.shape[-1]} != MLP input size {mlp.sizes[0]}")
    params = [Tensor(p.data) for p in mlp.params] if frozen else mlp.params
    h = x
    last = mlp.n_layers - 1
    for layer in range(mlp.n_layers):
        h = affine(h, params[2 * layer], params[2 * layer + 1])
        if layer < last:
            h = tanh(h) if mlp.hidden_act == "tanh" else relu(h)
        elif mlp.out_act == "tanh":
            h = tanh(h)
    return h


def predict(mlp: Mlp, x) -> np.ndarray:
    """Graph-free forward pass on plain arrays."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != mlp.sizes[0]:
        raise ContractError(f"input width {h.shape[-1]} != MLP input size {mlp.sizes[0]}")
    last = mlp.n_layers - 1
    for layer in range(mlp.n_layers):
        h = h @ mlp.params[2 * layer].data + mlp.params[2 * layer + 1].data
        if layer < last:
            h = np.tanh(h) if mlp.hidden_act == "tanh" else np.maximum(h, 0.0)
        elif mlp.out_act == "tanh":
            h = np.tanh(h)
    return h


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, learning_rate):
    """Bias-corrected Adam update, in place on ``params``; returns ``params``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ContractError("params, grads and Adam state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam bound to a list of parameter tensors."""

    def __init__(self, tensors, lr):
        self.tensors = list(tensors)
        self.lr = lr
        self.state = AdamState.zeros_like([t.data for t in self.tensors])

    def step(self):
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors]
        adam_step([t.data for t in self.tensors], grads, self.state, self.lr)

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _fmt(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def mlp_to_text(mlp: Mlp) -> str:
    lines = [CKPT_MAGIC,
             "sizes " + " ".join(str(s) for s in mlp.sizes),
             f"activations {mlp.hidden_act} {mlp.out_act}"]
    lines += [_fmt(p.data) for p in mlp.params]
    return "\n".join(lines) + "\n"


def mlp_from_text(text: str) -> Mlp:
    return _read_mlp(io.StringIO(text))


def _read_mlp(fh) -> Mlp:
    header = fh.readline().rstrip("\n")
    if header != CKPT_MAGIC:
        raise ConfigError(f"not an {CKPT_MAGIC} checkpoint (header {header!r})")
    tag, *sizes = fh.readline().split()
    if tag != "sizes":
        raise ConfigError("checkpoint is missing the sizes line")
    sizes = [int(s) for s in sizes]
    tag, hidden, out = fh.readline().split()
    if tag != "activations":
        raise ConfigError("checkpoint is missing the activations line")
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            vals = np.array([float(v) for v in fh.readline().split()], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ConfigError(f"checkpoint array has {vals.size} values, expected {shape}")
            params.append(Tensor(vals.reshape(shape), True))
    return Mlp(sizes, params, hidden, out)


def save_mlp(mlp: Mlp, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(mlp_to_text(mlp))


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return _read_mlp(fh)


def soft_update(target: Mlp, online: Mlp, tau: float):
    for t, o in zip(target.params, online.params):
        t.data *= 1.0 - tau
        t.data += tau * o.data
