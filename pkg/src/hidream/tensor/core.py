"""Dense tensors with reverse-mode automatic differentiation.

Values live in contiguous numpy buffers (float32 or float64). Every operation
whose inputs require gradients appends a record to the active :class:`Graph`;
:func:`backward` walks those records in strict reverse append order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


_uid = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "out_uid", "backward", "index", "graph")

    def __init__(self, op, inputs, out_uid, backward, index, graph):
        self.op = op
        self.inputs = inputs
        self.out_uid = out_uid
        self.backward = backward
        self.index = index
        self.graph = graph


class Graph:
    """Append-only tape of operation records.

    Use as a context manager to scope a forward/backward pass; the tape is
    released on exit. Outside any explicit graph, ops land on a per-thread
    default graph that :func:`reset_graph` clears.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def append(self, op, inputs, out_uid, backward) -> Node:
        node = Node(op, inputs, out_uid, backward, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        self.nodes.clear()


def _stack() -> list:
    st = getattr(_state, "graphs", None)
    if st is None:
        st = _state.graphs = [Graph()]
    return st


def current_graph() -> Graph:
    return _stack()[-1]


def reset_graph() -> None:
    """Drop every record on the default (outermost) graph."""
    _stack()[0].nodes.clear()


class Tensor:
    """A dense row-major array that optionally tracks gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_uid", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype: str | None = None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.ascontiguousarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype not in _NAMES:
                arr = arr.astype(np.float64)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._uid = next(_uid)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return scalar_mul(self, o)
        return mul(self, o)

    def __rmul__(self, o):
        if isinstance(o, (int, float)):
            return scalar_mul(self, o)
        return mul(o, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, o):
        if isinstance(o, (int, float)):
            return scalar_mul(self, 1.0 / o)
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dt = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dt)


def _check_finite(op: str, out: np.ndarray) -> None:
    # cheap reduction first; full scan only when the sum is non-finite
    if out.size and not np.isfinite(np.add.reduce(out, axis=None)):
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output from op '{op}'")


def _check_dtypes(op: str, tensors: Sequence[Tensor]) -> None:
    dts = {t.data.dtype for t in tensors}
    if len(dts) > 1:
        raise DimensionError(f"{op}: dtype mismatch {[t.dtype for t in tensors]}")


def _make(op: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap ``out`` and, if needed, record how to differentiate it."""
    _check_finite(op, out)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res._node = None
    res._uid = next(_uid)
    res.name = None
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    res.requires_grad = needs
    if needs:
        res._node = current_graph().append(op, inputs, res._uid, backward)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bcast_shapes(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_dtypes("add", (a, b))
    _bcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_dtypes("sub", (a, b))
    _bcast_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_dtypes("mul", (a, b))
    _bcast_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_dtypes("div", (a, b))
    _bcast_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _make("div", out, (a, b), bw)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    p = float(p)
    return _make("pow", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _make("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _make("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def _sigmoid_np(z):
    # exp of -|z| never overflows; pick the matching branch per element
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e).astype(z.dtype, copy=False) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    return _make("silu", xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _make("softplus", np.logaddexp(0, xd).astype(xd.dtype), (x,), lambda g: (g * _sigmoid_np(xd),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm_channels(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every spatial position across channels (axis 1), no affine."""
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return _make("layer_norm_channels", y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    ax = _norm_axis(axis, xd.ndim)
    out = xd.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, xd.shape),)
    return _make("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    ax = _norm_axis(axis, xd.ndim)
    n = int(np.prod([xd.shape[a] for a in ax])) if ax else 1
    out = xd.mean(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, xd.shape),)
    return _make("mean", np.asarray(out), (x,), bw)


def l1_norm(x: Tensor) -> Tensor:
    xd = x.data
    return _make("l1_norm", np.asarray(np.abs(xd).sum()), (x,), lambda g: (g * np.sign(xd),))


def l2_norm(x: Tensor) -> Tensor:
    xd = x.data
    n = np.sqrt((xd * xd).sum())

    def bw(g):
        if n == 0:
            return (np.zeros_like(xd),)
        return (g * xd / n,)
    return _make("l2_norm", np.asarray(n), (x,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    xd = x.data
    out = np.array(xd[idx], copy=True)

    def bw(g):
        full = np.zeros_like(xd)
        np.add.at(full, idx, g)
        return (full,)
    return _make("getitem", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes("concat", tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))
    return _make("concat", out, tensors, bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes("stack", tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _make("stack", out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", (a, b))
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shapes {ad.shape} and {bd.shape} do not align")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb
    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    ins = (x, w) if b is None else (x, w, b)
    _check_dtypes("linear", ins)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T
    if b is not None:
        if b.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} vs weight {wd.shape}")
        out = out + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)
    return _make("linear", out, ins, bw)


def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution, ``w`` of shape (out, in). No padding."""
    ins = (x, w) if b is None else (x, w, b)
    _check_dtypes("conv2d_1x1", ins)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv2d_1x1: input {xd.shape} vs weight {wd.shape}")
    n, c, h, wdt = xd.shape
    o = wd.shape[0]
    xf = xd.reshape(n, c, h * wdt)
    out = np.matmul(wd, xf)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, h, wdt)

    def bw(g):
        gf = g.reshape(n, o, h * wdt)
        gx = np.matmul(wd.T, gf).reshape(xd.shape) if x.requires_grad else None
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))
    return _make("conv2d_1x1", out, ins, bw)


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero padding 1.

    ``w`` has shape (out, in, 3, 3).
    """
    ins = (x, w) if b is None else (x, w, b)
    _check_dtypes("conv2d_3x3", ins)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.shape[1:] != (xd.shape[1], 3, 3):
        raise DimensionError(f"conv2d_3x3: input {xd.shape} vs weight {wd.shape}")
    n, c, h, wdt = xd.shape
    o = wd.shape[0]
    cols = kernels.im2col3x3(xd)
    wf = wd.reshape(o, c * 9)
    out = np.matmul(wf, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, h, wdt)

    def bw(g):
        gf = g.reshape(n, o, h * wdt)
        gx = kernels.col2im3x3(np.matmul(wf.T, gf), h, wdt) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))
    return _make("conv2d_3x3", out, ins, bw)


# ---------------------------------------------------------------------------
# spatial resampling and filtering
# ---------------------------------------------------------------------------

def avg_pool2(x: Tensor) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial extent {(h, w)} not even")
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25),)
    return _make("avg_pool2", out, (x,), bw)


def nearest_upsample2(x: Tensor) -> Tensor:
    xd = x.data
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)
    return _make("nearest_upsample2", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


_BLUR_CACHE: dict = {}


def blur_matrix(n: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """1-D Gaussian smoothing operator with edge-replicate boundary, as an n x n matrix."""
    key = (n, float(sigma), np.dtype(dtype).str)
    m = _BLUR_CACHE.get(key)
    if m is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
        offs = np.arange(-radius, radius + 1)
        k = np.exp(-0.5 * (offs / sigma) ** 2)
        k /= k.sum()
        m = np.zeros((n, n))
        rows = np.arange(n)
        for o, kv in zip(offs, k):
            np.add.at(m, (rows, np.clip(rows + o, 0, n - 1)), kv)
        m = m.astype(dtype)
        m.setflags(write=False)
        _BLUR_CACHE[key] = m
    return m


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur over the last two axes (edge-replicate padding)."""
    if sigma <= 0:
        raise ContractError("gaussian_blur: sigma must be positive")
    xd = x.data
    h, w = xd.shape[-2:]
    kh = blur_matrix(h, sigma, xd.dtype)
    kw = blur_matrix(w, sigma, xd.dtype)
    out = np.matmul(np.matmul(kh, xd), kw.T)
    return _make("gaussian_blur", out, (x,), lambda g: (np.matmul(np.matmul(kh.T, g), kw),))


def laplacian(x: Tensor, sigma: float) -> Tensor:
    """Band-pass as a difference of Gaussians, blur(sigma) - blur(2 sigma)."""
    return sub(gaussian_blur(x, sigma), gaussian_blur(x, 2.0 * sigma))


# ---------------------------------------------------------------------------
# dispatch and backward
# ---------------------------------------------------------------------------

OPS: dict[str, Callable] = {
    "conv2d_3x3": conv2d_3x3,
    "conv2d_1x1": conv2d_1x1,
    "linear": linear,
    "relu": relu,
    "silu": silu,
    "add": add,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "mean": mean,
    "sum": sum_,
    "l1_norm": l1_norm,
    "l2_norm": l2_norm,
    "avg_pool2": avg_pool2,
    "nearest_upsample2": nearest_upsample2,
    "gaussian_blur": gaussian_blur,
    "laplacian": laplacian,
    "concat_channels": concat_channels,
    "softmax": softmax,
    "layer_norm_channels": layer_norm_channels,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "clip": clip,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op from :data:`OPS`."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ContractError(f"unknown op '{op}'") from None
    return fn(*inputs, **kwargs)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if root._node is None:
        if root.requires_grad:
            _accumulate(root, np.ones_like(root.data))
        return
    graph = root._node.graph
    pending: dict[int, np.ndarray] = {root._uid: np.ones_like(root.data)}
    for node in reversed(graph.nodes[: root._node.index + 1]):
        g = pending.pop(node.out_uid, None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, gi)
            else:
                prev = pending.get(inp._uid)
                pending[inp._uid] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape).reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
