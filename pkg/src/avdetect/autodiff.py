"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape`.  Outside
any tape (or when no input requires a gradient) they are plain numpy calls,
which is how inference runs.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     f = (x * x).sum()
    >>> grads = backward(tape, f)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "NumericError", "backward",
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape", "sum",
    "mean", "softmax", "layer_norm", "gelu", "embedding", "concat", "take",
    "cross_entropy", "gradcheck",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _tapes() -> list["Tape"]:
    # Each thread records onto its own tape stack.
    try:
        return _local.tapes
    except AttributeError:
        _local.tapes = []
        return _local.tapes


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and min(arr.shape) == 0:
            raise DimensionError(f"empty dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every node's parents were
    produced earlier on the tape (or are leaves).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(_finite(data, op))
    tapes = _tapes()
    if tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, tuple(parents), backward_fn)
        out._node = node
        tapes[-1].nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every leaf that requires a gradient.

    Each leaf's ``grad`` is overwritten; the same arrays are returned keyed by
    leaf tensor.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._node is None or root._node not in tape.nodes:
        raise ValueError("root was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._node is None:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record("gelu", out, (x,), bw)


# -- shape ops ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2  # weight matrix: fold the leading axes into one BLAS call

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ np.ascontiguousarray(bd.T)).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ np.ascontiguousarray(bd)).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    return _record("matmul", out, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[t.shape for t in tensors]}: {exc}") from None
    return _record("concat", data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing, ``a[index]``."""
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("take", np.array(a.data[index]), (a,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def bw(g):
        full = np.zeros(rows)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _record("embedding", table.data[ids], (table,), bw)


# -- normalisation / probabilities ------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(logits, axis: int = -1) -> Tensor:
    logits = _as_tensor(logits)
    y = _softmax(logits.data, axis)
    return _record("softmax", y, (logits,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardise the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx,
                (g * xhat).sum(axis=lead) if gain.requires_grad else None,
                g.sum(axis=lead) if bias.requires_grad else None)

    return _record("layer_norm", xhat * gd + bias.data, (x, gain, bias), bw)


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over leading axes.

    ``logits`` is ``[n_vocab]`` with an int target, or ``[..., n_vocab]`` with an
    integer array of matching leading shape.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target)
    v = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {target.shape} do not match logits {logits.shape}")
    if target.dtype.kind not in "iu":
        raise TypeError("targets must be integer token ids")
    if target.size and (target.min() < 0 or target.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of {v}")
    flat = logits.data.reshape(-1, v)
    t = target.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    losses = lse - flat[np.arange(len(t)), t]
    n = len(t)

    def bw(g):
        p = _softmax(flat, 1)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _record("cross_entropy", np.array(losses.mean()), (logits,), bw)


# -- verification ------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6):
    """Compare tape gradients of ``fn()`` with central finite differences.

    Returns the worst relative error ``|a - n| / max(|a|, |n|, floor)`` over the
    checked entries.  The central difference carries round-off of about
    ``eps * |f| / h``; the floor is raised so that this round-off alone stays
    below 1e-4 relative error (``4e4 * eps * max(|f|, 1) / h``), which keeps
    entries whose true gradient is zero from registering as failures.
    ``max_entries`` subsamples each parameter.
    """
    with Tape() as tape:
        out = fn()
    analytic = backward(tape, out)
    floor = max(floor, 4e4 * np.finfo(np.float64).eps * max(abs(out.item()), 1.0) / h)
    worst = 0.0
    for p in params:
        ga = analytic.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
