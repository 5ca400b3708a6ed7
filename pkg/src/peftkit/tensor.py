"""Dense tensors with reverse-mode automatic differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, records a backward closure plus a monotonically increasing sequence
number. :class:`Tape` collects the ops reachable from a loss and replays them
in exact reverse execution order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    """Disable op recording on the current thread."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A leaf tensor with persistent gradient storage and a trainable flag.

    Non-trainable parameters never receive gradient and are skipped by the
    optimizer, so their values are bit-identical across training steps.
    """

    __slots__ = ()

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _result(ad * bd, (a, b), back, "mul")


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return _result(y, (x,), lambda g: (-g * y * y,), "reciprocal")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    xd = x.data
    s = _sigmoid(xd)
    return _result(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


# shape ops -------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, src),), "broadcast_to")


def getitem(x: Tensor, idx) -> Tensor:
    src, dt = x.shape, x.dtype

    def back(g):
        out = np.zeros(src, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), back, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    src, dt = weight.shape, weight.dtype

    def back(g):
        out = np.zeros(src, dtype=dt)
        np.add.at(out, ids, g)
        return (out,)

    return _result(weight.data[ids], (weight,), back, "embedding")


# reductions ------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# linear algebra and normalizers ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting."""
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            if bd.ndim == 2:
                # weight operand: fold every leading axis into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), back, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max-shifted softmax along ``axis``."""
    xd = x.data
    z = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),), "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - np.max(xd, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _result(y, (x,), back, "log_softmax")


def rms_norm(x: Tensor, w: Tensor, eps: float = 1e-5) -> Tensor:
    """``w * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"rms_norm width mismatch: {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def back(g):
        gh = g * wd
        gx = r * gh - xd * (r ** 3) * np.mean(gh * xd, axis=-1, keepdims=True)
        gw = (g * xhat).reshape(-1, wd.shape[-1]).sum(axis=0)
        return gx, gw

    return _result(wd * xhat, (x, w), back, "rms_norm")


def rope_apply(x: Tensor, positions, theta_base: float = 10000.0) -> Tensor:
    """Rotate consecutive channel pairs by ``pos * theta_base**(-2i/d_head)``.

    ``x`` has shape ``(..., seq, heads, d_head)``; ``positions`` has length seq.
    """
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rope needs an even head width, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-3],):
        raise ShapeError(f"expected {x.shape[-3]} positions, got {pos.shape}")
    inv_freq = theta_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :].astype(x.dtype)
    sin = np.sin(ang)[:, None, :].astype(x.dtype)

    def rotate(v, s):
        v0, v1 = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = v0 * cos - v1 * s
        out[..., 1::2] = v0 * s + v1 * cos
        return out

    return _result(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope")


def cross_entropy_next_token(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions whose target is not ignored.

    ``logits`` is ``(..., seq, V)`` and ``targets`` matches its leading shape.
    """
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    V = logits.shape[-1]
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("no unmasked positions")
    bad = keep & ((t < 0) | (t >= V))
    if bad.any():
        raise ValueError(f"target id {int(t[bad][0])} out of range [0, {V})")
    ld = logits.data
    z = ld - np.max(ld, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(keep, t, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(keep, picked, 0.0)) / n

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None],
                          np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        p *= keep[..., None]
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=ld.dtype), (logits,), back, "cross_entropy")


# backward --------------------------------------------------------------------


class Tape:
    """The differentiable ops that produced ``output``, in execution order."""

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        ops: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.is_leaf():
                continue
            seen.add(id(t))
            ops.append(t)
            stack.extend(t._parents)
        ops.sort(key=lambda t: t._seq)
        self.output = output
        self.ops = ops

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, seed: np.ndarray | None = None) -> list[Tensor]:
        """Propagate from the output; returns the ops in the order visited.

        Contributions to each leaf are summed within the pass and added to its
        ``grad`` once, so repeating a backward pass scales grads exactly.
        """
        out = self.output
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        visited = []
        if out.is_leaf():
            _accumulate_leaf(out, grads[id(out)])
            return visited
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            visited.append(node)
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.is_leaf():
                    prev = leaves.get(id(p))
                    leaves[id(p)] = (p, pg if prev is None else prev[1] + pg)
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for p, g in leaves.values():
            _accumulate_leaf(p, g)
        return visited


def _accumulate_leaf(p: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=p.dtype).reshape(p.shape)
    if p.grad is None:
        p.grad = g.copy()
    else:
        p.grad = p.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape(loss).backward()


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                      analytic: Sequence[np.ndarray] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by reference. When
    ``analytic`` is omitted it is obtained by running :func:`backward` on ``f()``.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = np.zeros_like(p.data)
        backward(f())
        analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            a = np.asarray(a).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-12)
                worst = max(worst, float(err))
    return worst
