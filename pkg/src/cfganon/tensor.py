"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable op records a node stamped with a monotonically increasing
sequence number. ``backward`` walks the nodes reachable from the loss in
reverse recording order, visiting each exactly once, then frees the graph:
calling ``backward`` a second time on the same loss raises ``GraphFreedError``
until the forward pass is recomputed. Leaf gradients accumulate into
``Tensor.grad`` until cleared with ``zero_grad``.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_sequence = itertools.count()
# grad mode is per thread: sweep workers enter no_grad concurrently
_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class GraphFreedError(RuntimeError):
    """Raised when backward is called on a graph that was already consumed."""


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out._seq = next(_sequence)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # one operand must already have the result shape; the other broadcasts into it
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"shape mismatch: {a} vs {b}") from None
    if shape != a and shape != b:
        raise ValueError(f"unsupported two-sided broadcast: {a} vs {b}")
    return shape


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def elementwise(kind: str, a, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def gated_activation(a: Tensor, b: Tensor) -> Tensor:
    """WaveNet gate ``tanh(a) * sigmoid(b)``."""
    if a.shape != b.shape:
        raise ValueError(f"gate halves differ in shape: {a.shape} vs {b.shape}")
    ta = np.tanh(a.data)
    sb = _sigmoid(b.data)
    return _make(
        ta * sb,
        (a, b),
        lambda g: (g * sb * (1.0 - ta * ta), g * ta * sb * (1.0 - sb)),
    )


# structural ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (second to last)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[-2] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[..., lo:hi, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=-2), tuple(tensors), grad_fn)


def split_channels(x: Tensor, n: int) -> list[Tensor]:
    """Split the channel axis into ``n`` equal chunks."""
    c = x.shape[-2]
    if c % n:
        raise ValueError(f"cannot split {c} channels into {n} parts")
    step = c // n
    parts = []
    for i in range(n):
        lo, hi = i * step, (i + 1) * step

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros(x.shape)
            full[..., lo:hi, :] = g
            return (full,)

        parts.append(_make(x.data[..., lo:hi, :], (x,), grad_fn))
    return parts


# reductions ----------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _make(
        np.asarray(np.mean(diff * diff)),
        (pred, target),
        lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n),
    )


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``weight`` is ``[C_out, C_in, K]``
    with odd ``K``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    c_out, c_in, k = weight.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    b, _, length = xd.shape
    pad = k // 2
    wmat = weight.data.reshape(c_out, c_in * k)
    if k == 1:
        cols = np.ascontiguousarray(xd.transpose(0, 2, 1)).reshape(b * length, c_in)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
        windows = sliding_window_view(xp, k, axis=2)  # [B, C_in, L, K]
        cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(b * length, c_in * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, length, c_out).transpose(0, 2, 1)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        gmat = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(b * length, c_out)
        grad_w = (gmat.T @ cols).reshape(weight.shape)
        gcols = gmat @ wmat
        if k == 1:
            grad_x = gcols.reshape(b, length, c_in).transpose(0, 2, 1)
        else:
            gcols = gcols.reshape(b, length, c_in, k)
            gxp = np.zeros((b, c_in, length + 2 * pad))
            for j in range(k):
                gxp[:, :, j : j + length] += gcols[:, :, :, j].transpose(0, 2, 1)
            grad_x = gxp[:, :, pad : pad + length]
        if squeeze:
            grad_x = grad_x[0]
        grads = [np.ascontiguousarray(grad_x), grad_w]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    return _make(out, parents, grad_fn)


# backward ------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphFreedError("graph already consumed by an earlier backward; recompute the forward pass")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._freed:
            raise GraphFreedError("loss depends on a node consumed by an earlier backward")
        if t._backward is None:
            if t.requires_grad:
                leaves[id(t)] = t
            continue
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(node), None)
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._backward = None
        node._parents = ()
        node._freed = True

    for key, leaf in leaves.items():
        if key in grads:
            leaf.grad = grads[key] if leaf.grad is None else leaf.grad + grads[key]


# optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Iterable[np.ndarray], **hyper) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(
            (p.data for p in self.params), lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


def grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)
