"""Small reverse-mode autodiff on numpy, plus the layers the Q-network needs.

Everything is float64. Graph recording can be switched off with
:func:`no_grad` for action selection and target computation.
"""
from __future__ import annotations

import contextlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

CHECKPOINT_VERSION = 1

_GRAD_ENABLED = True


class ConfigurationError(ValueError):
    """Input does not match the network configuration."""


class GraphStateError(RuntimeError):
    """Backward requested on a tensor that no recorded computation produced."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; update rejected")
        self.name = name


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            g = np.asarray(g, dtype=np.float64).reshape(self.shape)
            self.grad = g if g.flags.owndata and g.flags.writeable else g.copy()
        else:
            self.grad = self.grad + g

    @staticmethod
    def _make(data, parents: tuple, backward) -> "Tensor":
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if not track:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def backward(self, grad=None):
        if not self.requires_grad:
            raise GraphStateError("tensor is not part of a recorded computation")
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(out, (self, other), lambda g: (g / b, -g * out / b))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

        return Tensor._make(a @ b, (self, other), backward)

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def __getitem__(self, idx):
        orig = self.shape

        basic = not any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def backward(g):
            full = np.zeros(orig)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), backward)

    def sum(self, axis=None, keepdims: bool = False):
        orig = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, orig),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions --------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self):
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def softplus(self):
        a = self.data
        return Tensor._make(softplus_np(a), (self,), lambda g: (g * special.expit(a),))

    def lgamma(self):
        a = self.data
        return Tensor._make(special.gammaln(a), (self,), lambda g: (g * special.digamma(a),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def softplus_np(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow for large x."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``. The mask carries no gradient."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._make(
        np.where(mask, a.data, b.data), (a, b), lambda g: (g * mask, g * ~mask)
    )


def take_per_row(t: Tensor, index, axis: int = 1) -> Tensor:
    """out[b, ...] = t[b, ..., index[b], ...] along ``axis`` (one pick per leading row)."""
    t = as_tensor(t)
    index = np.asarray(index)
    B = t.shape[0]
    idx = tuple(
        np.arange(t.shape[k]).reshape([-1 if j == k else 1 for j in range(axis)]) for k in range(axis)
    ) + (index.reshape([-1] + [1] * (axis - 1)),)
    if len(index) != B:
        raise ConfigurationError(f"{len(index)} indices for {B} rows")
    orig = t.shape

    def backward(g):
        full = np.zeros(orig)
        full[idx] = g  # one pick per row, no duplicates
        return (full,)

    return Tensor._make(t.data[idx], (t,), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 (or any odd k) stride-1 convolution with zero padding, channels last.

    x: [B, H, W, C_in]; weight: [k, k, C_in, C_out]; bias: [C_out].
    Returns [B, H, W, C_out].
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k = weight.shape[0]
    p = k // 2
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # [B, H, W, C, k, k] -> [B, H, W, k, k, C]
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(B * H * W, k * k * C)
    wmat = weight.data.reshape(k * k * C, -1)
    out = (cols @ wmat + bias.data).reshape(B, H, W, -1)

    def backward(g):
        g2 = g.reshape(B * H * W, -1)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, H, W, k, k, C)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + H, p:p + W, :]
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# Layers


class Module:
    """Holds named parameters; subclasses register them in ``self.params``."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ConfigurationError(f"{k}: expected shape {v.shape}, got {arr.shape}")
            v.data = arr.copy()

    def copy_from(self, other: "Module"):
        self.load_state_dict(other.state_dict())


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # He-style bound for ReLU layers: U(-sqrt(6/fan_in), sqrt(6/fan_in))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, module: Module, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 init_scale: float = 1.0):
        self.weight = Tensor(init_scale * _uniform_fan_in(rng, (n_in, n_out), n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        module.params[f"{name}.weight"] = self.weight
        module.params[f"{name}.bias"] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return as_tensor(x) @ self.weight + self.bias


class Conv2dSame:
    def __init__(self, module: Module, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3):
        fan_in = kernel * kernel * c_in
        self.weight = Tensor(_uniform_fan_in(rng, (kernel, kernel, c_in, c_out), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        module.params[f"{name}.weight"] = self.weight
        module.params[f"{name}.bias"] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_same(x, self.weight, self.bias)


class NIGTensors(NamedTuple):
    """Evidential parameters after the positivity transforms."""

    gamma: Tensor
    v: Tensor
    alpha: Tensor
    beta: Tensor


def evidential_transform(raw: Tensor, axis: int) -> NIGTensors:
    """Split raw head output along ``axis`` (size 4) into (gamma, v, alpha, beta).

    gamma is left unconstrained; v and beta go through softplus; alpha = 1 + softplus.
    """
    idx = [slice(None)] * raw.ndim

    def take(i):
        idx[axis] = i
        return raw[tuple(idx)]

    return NIGTensors(take(0), take(1).softplus(), take(2).softplus() + 1.0, take(3).softplus())


class QOutput(NamedTuple):
    quantiles: Tensor  # [..., A, N]
    nig: NIGTensors  # each [..., A, 2, N]


class QNetwork(Module):
    """Single conv layer feature extractor with an action-quantile head and an evidential head."""

    filters = 16

    def __init__(self, height: int, width: int, channels: int, num_actions: int, num_quantiles: int,
                 seed: int | np.random.Generator = 0):
        super().__init__()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.height, self.width, self.channels = height, width, channels
        self.num_actions, self.num_quantiles = num_actions, num_quantiles
        self.feature_dim = height * width * self.filters
        self.conv = Conv2dSame(self, "conv", channels, self.filters, rng)
        self.action_head = Linear(self, "action_head", self.feature_dim, num_actions * num_quantiles, rng)
        self.evidential_head = Linear(self, "evidential_head", self.feature_dim,
                                      4 * num_actions * 2 * num_quantiles, rng)

    def config(self) -> dict:
        return dict(height=self.height, width=self.width, channels=self.channels,
                    num_actions=self.num_actions, num_quantiles=self.num_quantiles)

    def clone(self) -> "QNetwork":
        other = QNetwork(**self.config(), seed=0)
        other.copy_from(self)
        return other

    def features(self, state) -> tuple[Tensor, bool]:
        x = as_tensor(state)
        if x.shape[-3:] != (self.height, self.width, self.channels):
            raise ConfigurationError(
                f"state shape {x.shape} does not match network input "
                f"{(self.height, self.width, self.channels)}"
            )
        batched = x.ndim == 4
        if not batched:
            x = x.reshape(1, *x.shape)
        h = self.conv(x).relu()
        return h.reshape(h.shape[0], self.feature_dim), batched

    def heads(self, state) -> tuple[Tensor, Tensor, bool]:
        """Action quantiles [B, A, N] and raw evidential output [B, 4, A, 2, N]."""
        feats, batched = self.features(state)
        B, A, N = feats.shape[0], self.num_actions, self.num_quantiles
        quantiles = self.action_head(feats).reshape(B, A, N)
        raw = self.evidential_head(feats).reshape(B, 4, A, 2, N)
        return quantiles, raw, batched

    def __call__(self, state) -> QOutput:
        quantiles, raw, batched = self.heads(state)
        A, N = self.num_actions, self.num_quantiles
        nig = evidential_transform(raw, axis=1)
        if not batched:
            quantiles = quantiles.reshape(A, N)
            nig = NIGTensors(*(t.reshape(A, 2, N) for t in nig))
        return QOutput(quantiles, nig)

    def action_quantiles(self, state) -> Tensor:
        """Action head only: [A, N] or [B, A, N]."""
        feats, batched = self.features(state)
        q = self.action_head(feats).reshape(feats.shape[0], self.num_actions, self.num_quantiles)
        return q if batched else q.reshape(self.num_actions, self.num_quantiles)

    def taken(self, states, actions) -> tuple[Tensor, NIGTensors]:
        """Quantiles [B, N] and evidential parameters [B, 2, N] of the taken actions only."""
        quantiles, raw, _ = self.heads(states)
        theta = take_per_row(quantiles, actions, axis=1)
        return theta, evidential_transform(take_per_row(raw, actions, axis=2), axis=1)


def forward(net: QNetwork, state) -> QOutput:
    return net(state)


class MLP(Module):
    """Dense ReLU network; used by the supervised harness and the gradient checks."""

    def __init__(self, sizes: Iterable[int], seed: int | np.random.Generator = 0, final_scale: float = 1.0):
        super().__init__()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        sizes = list(sizes)
        self.sizes = sizes
        self.layers = [
            Linear(self, f"fc{i}", a, b, rng, init_scale=final_scale if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = h.relu()
        return h


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dict(
            learning_rate=self.learning_rate, epsilon=self.epsilon, beta1=self.beta1,
            beta2=self.beta2, step=self.step,
            m={k: _pack(a) for k, a in self.m.items()},
            v={k: _pack(a) for k, a in self.v.items()},
        )

    @classmethod
    def from_json(cls, d: dict) -> "AdamState":
        return cls(
            learning_rate=d["learning_rate"], epsilon=d["epsilon"], beta1=d["beta1"],
            beta2=d["beta2"], step=d["step"],
            m={k: _unpack(a) for k, a in d["m"].items()},
            v={k: _unpack(a) for k, a in d["v"].items()},
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: AdamState):
    """One bias-corrected Adam update, in place. ``grads`` defaults to each param's ``.grad``."""
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigurationError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p.data = p.data - (state.learning_rate / c1) * m / denom
    return params


# ---------------------------------------------------------------------------
# Checkpoints


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    # float.hex keeps the round trip exact independent of the JSON float printer
    return {"shape": list(a.shape), "data": [float(x).hex() for x in a.ravel()]}


def _unpack(d: dict) -> np.ndarray:
    return np.array([float.fromhex(x) for x in d["data"]], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, net: Module, adam: AdamState | None = None,
                    rng: np.random.Generator | None = None, meta: dict | None = None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "network": {"class": type(net).__name__,
                    "config": net.config() if hasattr(net, "config") else None},
        "params": {k: _pack(v.data) for k, v in net.params.items()},
        "adam": adam.to_json() if adam is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, net: Module | None = None):
    """Returns (net, adam_state, rng, meta). Builds a QNetwork when ``net`` is None."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')!r}")
    if net is None:
        net = QNetwork(**doc["network"]["config"])
    net.load_state_dict({k: _unpack(v) for k, v in doc["params"].items()})
    adam = AdamState.from_json(doc["adam"]) if doc["adam"] is not None else None
    rng = None
    if doc["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
    return net, adam, rng, doc["meta"]


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
