"""Dense tensors with reverse-mode differentiation.

Every operation checks shapes explicitly; there is no implicit
broadcasting.  Shape adaptation goes through :func:`reshape` and
:func:`expand`.  Each result that depends on a differentiable input keeps
references to its parents and a closure mapping the output gradient to
input gradients; :func:`backward` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def get_precision() -> str:
    return "float64" if get_dtype() is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    prev = get_dtype()
    _state.dtype = _DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=get_dtype())
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product, or scaling by a Python number."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much faster than a branch on sign
    return 0.5 * np.tanh(0.5 * z) + 0.5


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid(xd)
    y = xd * s
    return _result(y, (x,), lambda g: (g * (s + y * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and normalizers


def _norm_axis(axis: int, ndim: int, op: str, shape) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, shape, detail=f"axis {axis} out of range")
    return axis % ndim


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        def bw(g):
            return (np.broadcast_to(g, shape).copy(),)
        return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)
    ax = _norm_axis(axis, x.ndim, "sum", shape)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, shape).copy(),)

    return _result(x.data.sum(axis=ax, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[_norm_axis(axis, x.ndim, "mean", x.shape)]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "softmax", x.shape)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "log_softmax", x.shape)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd, bd = gamma.data, beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _result(xhat * gd + bd, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w`` plus a bias row added to every row; x: (R, in), w: (in, out), b: (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    out = xd @ wd
    out += b.data
    return _result(out, (x, w, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size or any(s < 0 for s in shape):
        raise ShapeError("reshape", x.shape, shape)
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes of ``x`` up to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError("expand", x.shape, shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _result(np.broadcast_to(x.data, shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    ax = _norm_axis(axis, x.ndim, "slice", x.shape)
    n = x.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", x.shape, detail=f"range [{start}, {stop}) on axis {ax}")
    index = (np.s_[:],) * ax + (np.s_[start:stop],)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _result(x.data[index], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat", detail="no operands")
    ax = _norm_axis(axis, xs[0].ndim, "concat", xs[0].shape)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError("concat", *(t.shape for t in xs))
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def bw(g):
        return tuple(
            g[(np.s_[:],) * ax + (np.s_[bounds[i]:bounds[i + 1]],)] for i in range(len(xs))
        )

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), bw)


def gather_rows(table: Tensor, index) -> Tensor:
    """Rows ``table[index]`` of a 2-D table; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows", table.shape, idx.shape, detail="index out of range")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), bw)


def masked_select(x: Tensor, mask) -> Tensor:
    """Rows of a 2-D tensor where the boolean ``mask`` is set."""
    m = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or m.shape != (x.shape[0],):
        raise ShapeError("masked_select", x.shape, m.shape)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[m] = g
        return (gx,)

    return _result(x.data[m], (x,), bw)


# ---------------------------------------------------------------------------
# convolutions over time; layout is (batch, time, channels)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 1-D convolution. ``x``: (B, T, Cin), ``w``: (K, Cin, Cout)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1] or stride < 1 or padding < 0:
        raise ShapeError("conv1d", x.shape, w.shape)
    B, T, cin = x.shape
    K, _, cout = w.shape
    tp = T + 2 * padding
    if tp < K:
        raise ShapeError("conv1d", x.shape, w.shape, detail="input shorter than kernel")
    tout = (tp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    # (B, tp-K+1, Cin, K) -> strided -> (B, tout, K, Cin)
    win = sliding_window_view(xp, K, axis=1)[:, ::stride]
    cols = np.ascontiguousarray(np.swapaxes(win, 2, 3)).reshape(B * tout, K * cin)
    wd = w.data
    wmat = wd.reshape(K * cin, cout)
    out = (cols @ wmat).reshape(B, tout, cout)

    def bw(g):
        g2 = g.reshape(B * tout, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, tout, K, cin)
            gxp = np.zeros((B, tp, cin), dtype=g.dtype)
            span = stride * (tout - 1) + 1
            for k in range(K):
                gxp[:, k:k + span:stride] += gcols[:, :, k]
            gx = gxp[:, padding:padding + T]
        return gx, gw

    return _result(out, (x, w), bw)


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 'same' convolution. ``x``: (B, T, C), ``w``: (K, C) with K odd."""
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2] or w.shape[0] % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    B, T, C = x.shape
    K = w.shape[0]
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    wd = w.data
    out = np.zeros_like(x.data)
    for k in range(K):
        out += xp[:, k:k + T] * wd[k]

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            g2 = g.reshape(B * T, C)
            for k in range(K):
                gw[k] = np.einsum("nc,nc->c", g2, xp[:, k:k + T].reshape(B * T, C))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + T] += g * wd[k]
            gx = gxp[:, pad:pad + T]
        return gx, gw

    return _result(out, (x, w), bw)


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` such that every node precedes its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every differentiable leaf reachable from ``root``.

    Returns a map from leaf name to gradient for the named leaves.
    Intermediate gradients are released as soon as they are consumed.
    """
    if root.shape != ():
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.dtype)}
    named: dict[str, np.ndarray] = {}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return named
