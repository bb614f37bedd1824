"""Small reverse-mode autodiff kernel on top of numpy.

Only what the trajectory models need: affine maps, pointwise nonlinearities,
a fused LSTM cell with hand-written backward, BCE/MSE losses, Adam and a
central-difference gradient checker. Everything runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_FORMAT = "vtrack-ckpt"
CHECKPOINT_VERSION = 1


class NonFinite(FloatingPointError):
    """Raised when a forward value or gradient contains NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor(a.data + b.data, _parents=(a, b), _backward=back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.data, _parents=(a,), _backward=lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor(a.data * b.data, _parents=(a, b), _backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return self * reciprocal(other)

    def __rtruediv__(self, other):
        return as_tensor(other) * reciprocal(self)

    def __matmul__(self, other):
        a, b = self, as_tensor(other)

        def back(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor(a.data @ b.data, _parents=(a, b), _backward=back)

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            if _is_fancy(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            a._accumulate(full)

        return Tensor(a.data[idx], _parents=(a,), _backward=back)

    def reshape(self, *shape):
        a = self
        return Tensor(a.data.reshape(*shape), _parents=(a,),
                      _backward=lambda g: a._accumulate(g.reshape(a.shape)))

    def sum(self, axis=None):
        a = self

        def back(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return Tensor(a.data.sum(axis=axis), _parents=(a,), _backward=back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# pointwise ops ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,),
                  _backward=lambda g: x._accumulate(g * mask))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor(y, _parents=(x,), _backward=lambda g: x._accumulate(g * (1.0 - y * y)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor(y, _parents=(x,), _backward=lambda g: x._accumulate(g * y * (1.0 - y)))


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return Tensor(y, _parents=(x,), _backward=lambda g: x._accumulate(-g * y * y))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return Tensor(np.abs(x.data), _parents=(x,), _backward=lambda g: x._accumulate(g * s))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(np.concatenate([t.data for t in ts], axis=axis), _parents=tuple(ts), _backward=back)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def back(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor(np.stack([t.data for t in ts], axis=axis), _parents=tuple(ts), _backward=back)


# layers ----------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W + b


@dataclass
class LstmCellParams:
    """Gate weights stacked as [input | forget | output | candidate].

    W has shape (input_dim + hidden_dim, 4 * hidden_dim); rows are the input
    followed by the previous hidden state.
    """

    W: Tensor
    b: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.b.shape[-1] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[0] - self.hidden_dim


def lstm_step(params: LstmCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step over a batch. Returns (h_t, c_t)."""
    W, b = params.W, params.b
    H = params.hidden_dim
    if x_t.shape[-1] + H != W.shape[0]:
        raise ValueError(f"lstm input width {x_t.shape[-1]} + hidden {H} != {W.shape[0]}")
    xh = np.concatenate([x_t.data, h_prev.data], axis=-1)
    z = xh @ W.data + b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    o = _sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc
    _check_finite(h, "lstm hidden state")
    _check_finite(c, "lstm cell state")

    def back(grad):
        dh, dc = grad[:, :H], grad[:, H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev.data * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ], axis=-1)
        if W.requires_grad:
            W._accumulate(xh.T @ dz)
        if b.requires_grad:
            b._accumulate(dz.sum(axis=0))
        dxh = dz @ W.data.T
        if x_t.requires_grad:
            x_t._accumulate(dxh[:, :-H])
        if h_prev.requires_grad:
            h_prev._accumulate(dxh[:, -H:])
        if c_prev.requires_grad:
            c_prev._accumulate(dc * f)

    hc = Tensor(np.concatenate([h, c], axis=-1), _parents=(x_t, h_prev, c_prev, W, b), _backward=back)
    if not hc.requires_grad:
        return Tensor(h), Tensor(c)
    return hc[:, :H], hc[:, H:]


# losses ----------------------------------------------------------------------


def mse(pred: Tensor, target) -> Tensor:
    d = pred - as_tensor(target)
    return (d * d).mean()


def bce_with_logits(logits: Tensor, target: float | np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against target."""
    z = logits.data
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    loss = np.logaddexp(0.0, z) - z * t
    n = z.size

    def back(g):
        logits._accumulate(g * (_sigmoid(z) - t) / n)

    return Tensor(loss.mean(), _parents=(logits,), _backward=back)


# parameters, optimizer, checking ---------------------------------------------


def init_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def to_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(state: AdamState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """In-place bias-corrected Adam step; returns ``params`` for chaining."""
    for name, g in grads.items():
        _check_finite(g, f"gradient of {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` maps a dict of Tensors (same keys as ``params``) to a scalar Tensor.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = to_tensors(base)
    out = f(leaves)
    out.backward()
    worst = 0.0
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(f(to_tensors(base, requires_grad=False)).data)
            arr[idx] = orig - h
            fm = float(f(to_tensors(base, requires_grad=False)).data)
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            denom = max(abs(a), abs(numeric))
            if denom < 1e-7:
                continue
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named tensors as JSON; floats use repr so reloads are exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in np.asarray(arr).ravel()]}
            for name, arr in sorted(tensors.items())
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {
        name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        for name, t in doc["tensors"].items()
    }
    return tensors, doc.get("meta", {})
