"""Small reverse-mode differentiation engine over numpy arrays.

Every ``Tensor`` produced by an operation keeps references to its parents and a
closure that maps the output adjoint to parent adjoints. Nodes receive a
monotonically increasing creation index, so the creation order is the tape:
``backward`` replays adjoints in reverse creation order, which is a valid
reverse topological order and is deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _make(values, parents, backward_fn, op) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _result_dtype(a: Tensor, b: Tensor):
    # python scalars never upcast f32 operands
    if a.values.ndim == 0 and a.op == "leaf" and not a.requires_grad:
        return b.dtype
    if b.values.ndim == 0 and b.op == "leaf" and not b.requires_grad:
        return a.dtype
    return np.result_type(a.dtype, b.dtype)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    dt = _result_dtype(a, b)
    out = (a.values + b.values).astype(dt, copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    dt = _result_dtype(a, b)
    out = (a.values - b.values).astype(dt, copy=False)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    dt = _result_dtype(a, b)
    av, bv = a.values, b.values
    out = (av * bv).astype(dt, copy=False)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    dt = _result_dtype(a, b)
    av, bv = a.values, b.values
    out = (av / bv).astype(dt, copy=False)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
        "div",
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    # split branches keep exp from overflowing
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sqrt(x, eps: float = 0.0) -> Tensor:
    """``sqrt(x + eps)``."""
    x = as_tensor(x)
    out = np.sqrt(x.values + eps)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _make(out, (x,), bw, "sqrt")


def abs_smooth(x, eps: float = 1e-12) -> Tensor:
    """Differentiable ``|x|`` as ``sqrt(x**2 + eps)``."""
    x = as_tensor(x)
    return sqrt(mul(x, x), eps=eps)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the adjoint to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.values >= b.values
    out = np.where(pick_a, a.values, b.values).astype(_result_dtype(a, b))
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values).astype(_result_dtype(a, b))
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[i] for i in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.values[index]

    def bw(g):
        full = np.zeros_like(x.values)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), bw, "getitem")


def diagonal(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError("diagonal", x.shape)
    n = x.shape[0]

    def bw(g):
        full = np.zeros_like(x.values)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _make(np.diagonal(x.values).copy(), (x,), bw, "diagonal")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``b`` and 1-D, 2-D or batched ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    out = av @ bv

    def bw(g):
        ga = g @ bv.T
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """L2 norm; the adjoint at a zero vector is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt(np.sum(x.values * x.values, axis=axis, keepdims=keepdims))

    def bw(g):
        o, gg = out, g
        if axis is not None and not keepdims:
            o, gg = np.expand_dims(o, axis), np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, x.values / safe, 0.0) * gg,)

    return _make(np.asarray(out), (x,), bw, "norm")


def frobenius_norm(x) -> Tensor:
    return norm(x)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale each vector along ``axis`` to unit L2 norm; zero vectors stay zero."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.values * x.values, axis=axis, keepdims=True))
    nonzero = n > 0
    safe = np.where(nonzero, n, 1.0)
    out = x.values / safe

    def bw(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(nonzero, (g - out * proj) / safe, 0.0),)

    return _make(out, (x,), bw, "l2_normalize")


def covariance(x, rowvar: bool = True) -> Tensor:
    """Sample covariance with ``n - 1`` normalization.

    With ``rowvar`` each row is a variable observed along the columns, giving a
    (rows x rows) matrix, as in ``np.cov``. Otherwise columns are variables.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("covariance", x.shape)
    if not rowvar:
        x = transpose(x)
    n_obs = x.shape[1]
    if n_obs < 2:
        raise ShapeError("covariance", x.shape)
    centered = sub(x, mean(x, axis=1, keepdims=True))
    return mul(matmul(centered, transpose(centered)), 1.0 / (n_obs - 1))


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)


def conv2d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw), ``bias`` is (O,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    p = padding
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape)
    xv = x.values
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (N, Ho, Wo, C, kh, kw) -> rows of im2col
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.values.reshape(o, -1)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError("conv2d", weight.shape, bias.shape)
        out = out + bias.values
        parents.append(bias)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def avg_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling over (N, C, H, W)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("avg_pool2d", x.shape, (size, size))
    out = x.values.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return _make(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C); also accepts a single (C, H, W) map."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError("global_avg_pool", x.shape)
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# gradient flow


def detach(x) -> Tensor:
    """Same values, no gradient path upstream."""
    x = as_tensor(x)
    out = Tensor(x.values)
    out.op = "detach"
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad ancestor."""
    if loss.values.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    # collect the graph; creation order is the record order
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    adj: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = adj.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg).reshape(parent.shape)
            prev = adj.get(parent._id)
            adj[parent._id] = pg if prev is None else prev + pg


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "avg_pool2d": avg_pool2d,
    "global_avg_pool": global_avg_pool,
    "norm": norm,
    "sum": sum,
    "mean": mean,
    "sqrt": sqrt,
    "abs_smooth": abs_smooth,
    "exp": exp,
    "sigmoid": sigmoid,
    "concat": concat,
    "l2_normalize": l2_normalize,
    "covariance": covariance,
    "frobenius_norm": frobenius_norm,
    "maximum": maximum,
    "minimum": minimum,
    "diagonal": diagonal,
}


def primitive_forward_set() -> dict[str, Callable]:
    """Catalog of differentiable operations, keyed by name."""
    return dict(PRIMITIVES)


def numerical_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
