"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every primitive builds its output with :func:`_node`, which records the
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the recorded graph once in reverse topological
order and accumulates into the ``grad`` of leaf tensors.

Shapes must match exactly for binary ops. The only implicit broadcasting
is scalar arithmetic; anything else goes through :func:`broadcast_to`.
"""

from __future__ import annotations

import threading
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, NumericalError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar tensor, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                    else:
                        node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; tensor-tensor ops require equal shapes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(-self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _check_finite(arr: np.ndarray, op: str):
    # a finite sum implies finite elements; only confirm elementwise on failure
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by {op}")


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * a.data.dtype.type(c),), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    # mask is recomputed from the output so no extra buffer is retained
    return _node(out, (a,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


# --- shape manipulation ---------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-rule broadcast; the backward pass sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, s in enumerate(a.shape) if s == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g,)

    return _node(out, (a,), backward, "broadcast_to")


def select(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the leading axis."""
    if not -a.shape[0] <= i < a.shape[0]:
        raise ShapeError(f"select: index {i} out of range for leading dim {a.shape[0]}")
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _node(a.data[i].copy(), (a,), backward, "select")


# --- reductions -----------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axes, keepdims), 1.0 / count)


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties resolve to the lowest index, which gets all the gradient."""
    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return _node(out if keepdims else out.squeeze(ax), (a,), backward, "amax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=ax, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (a,), lambda g: (g - s * g.sum(axis=ax, keepdims=True),), "log_softmax")


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-d operands or batched operands with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


# --- convolutional pieces -------------------------------------------------

def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


_COL_BUDGET = 64 * 2**20  # bytes of im2col buffer per chunk


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation, ``[N,Cin,H,W] * [Cout,Cin,kH,kW] -> [N,Cout,H',W']``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if (h + 2 * ph - kh) % sh or (w + 2 * pw - kw) % sw or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} with stride "
                         f"{(sh, sw)} padding {(ph, pw)} give a non-integral output size")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    ck = c * kh * kw
    wf = weight.data.reshape(o, ck)
    chunk = max(1, _COL_BUDGET // max(1, ck * oh * ow * x.data.itemsize))

    def cols_for(lo, hi):
        xp = x.data[lo:hi]
        if ph or pw:
            xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        # [n, C, oh, ow, kh, kw] -> [n, C*kh*kw, oh*ow]
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(hi - lo, ck, oh * ow)

    out = np.empty((n, o, oh * ow), dtype=np.result_type(x.data, weight.data))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        np.matmul(wf, cols_for(lo, hi), out=out[lo:hi])
    out = out.reshape(n, o, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.zeros_like(wf) if weight.requires_grad else None
        gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype) if x.requires_grad else None
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            if gw is not None:
                cols = cols_for(lo, hi)
                for i in range(hi - lo):
                    gw += g2[lo + i] @ cols[i].T
            if gxp is not None:
                gcols = (wf.T @ g2[lo:hi]).reshape(hi - lo, c, kh, kw, oh, ow)
                for i in range(kh):
                    for j in range(kw):
                        gxp[lo:hi, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, i, j]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if ph or pw else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, None if gw is None else gw.reshape(weight.shape), gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} with gamma {gamma.shape} beta {beta.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    axes = (0, 2, 3)
    if mode == "train":
        if count < 2:
            raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean *= 1 - momentum
        stats.mean += momentum * mu
        stats.var *= 1 - momentum
        stats.var += momentum * var * count / (count - 1)
    elif mode == "eval":
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)

    def normalized():
        xhat = x.data - mu[None, :, None, None]
        xhat *= invstd[None, :, None, None]
        return xhat

    out = normalized()
    out *= gamma.data[None, :, None, None]
    out += beta.data[None, :, None, None]

    def backward(g):
        # recomputed rather than saved: the input is retained by the graph anyway
        xhat = normalized()
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                s1 = gxhat.sum(axis=axes)[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (gxhat - (s1 + xhat * s2) / count) * invstd[None, :, None, None]
            else:
                gx = gxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward, "batchnorm2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g):
        up = np.empty((n, c, h, w), dtype=g.dtype)
        up.reshape(n, c, h // size, size, w // size, size)[...] = \
            (g / (size * size))[:, :, :, None, :, None]
        return (up,)

    return _node(out, (x,), backward, "avg_pool2d")


# --- fused losses ---------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed directly from logits."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("bce_with_logits: non-finite logits")
    l = logits.data
    per = np.maximum(l, 0) - l * y + np.log1p(np.exp(-np.abs(l)))
    count = l.size
    out = np.asarray(per.mean(), dtype=l.dtype)
    return _node(out, (logits,), lambda g: (g * (_sigmoid(l) - y) / count,), "bce_with_logits")


# --- parameters -----------------------------------------------------------

class ParameterSet(Mapping):
    """Name -> Tensor map iterated in sorted-name order."""

    def __init__(self, items=None):
        self._items: dict[str, Tensor] = {}
        for name, t in (dict(items) if items else {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor):
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._items[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self._items.values()]))

    def zero_grads(self):
        for t in self._items.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({k: Tensor(v.data.astype(dtype)) for k, v in self.items()})


def zero_grads(params):
    for t in params.values():
        t.grad = None


# --- finite-difference verification --------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def gradient_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
                   tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` closes over the tensors in ``params`` and must be deterministic.
    The relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise NumericalError(f"gradient_check needs float64 tensors; {name} is {t.dtype}")
        t.requires_grad = True
        t.grad = None
    loss = f()
    loss.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for name, t in params.items()}

    def evaluate() -> float:
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise NonFiniteError("gradient_check: non-finite function value")
        return v

    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        report.max_rel_error[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return report
