"""Dense tensors with reverse-mode automatic differentiation, backed by numpy.

Every op builds its output eagerly and, when gradients are being tracked,
records its parents plus a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks that record in reverse
topological order.

Binary elementwise ops accept either two tensors of identical shape or a
tensor and a python scalar; any other shape mixing goes through
:meth:`Tensor.expand` / :meth:`Tensor.reshape` explicitly.
"""
from __future__ import annotations

import contextlib
from numbers import Number
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 1000  # numpy scalars defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, parents first."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward() called on a tensor that is not part of a graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise

def _is_scalar(x) -> bool:
    return isinstance(x, Number) or (isinstance(x, np.ndarray) and x.ndim == 0)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - b, (a,), lambda g: (g,), "sub_scalar")
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data / b, (a,), lambda g: (g / b,), "div_scalar")
    b = as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    if not _is_scalar(exponent):
        raise TypeError("power() takes a scalar exponent")
    ad = a.data
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast singleton axes of ``a`` to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    return _make(
        np.broadcast_to(a.data, shape),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
        "expand",
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# linear algebra and attention

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
        "matmul",
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# spatial ops; inputs are c×h×w or n×c×h×w

def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected c×h×w or n×c×h×w input, got {x.shape}")


def _out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x`` with ``weight`` (out×in×k×k)."""
    xd, squeeze = _as_batch(x, "conv2d")
    n, c, h, w = xd.shape
    if weight.ndim != 4 or weight.shape[1] != c:
        raise ShapeError(f"conv2d: weight {weight.shape} does not match input {x.shape}")
    o, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel must be odd, got {kh}×{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    ho = _out_extent(h, kh, stride, padding, dilation)
    wo = _out_extent(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ConfigError(
            f"conv2d: output extent {ho}×{wo} from input {h}×{w}, kernel {kh}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if kh == 1 and kw == 1 and stride == 1 and p == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols6 = np.empty((c, kh, kw, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i * dilation:i * dilation + span_h:stride,
                         j * dilation:j * dilation + span_w:stride]
                cols6[:, i, j] = win.transpose(1, 0, 2, 3)
        cols = cols6.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        if squeeze:
            g = g[None]
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if kh == 1 and kw == 1 and stride == 1 and p == 0:
                gx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros(xp.shape, dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i * dilation:i * dilation + span_h:stride,
                            j * dilation:j * dilation + span_w:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, p:p + h, p:p + w]
            if squeeze:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling with -inf padding; gradient goes to the first maximal element."""
    if kernel % 2 == 0:
        raise ConfigError(f"maxpool2d: kernel must be odd, got {kernel}")
    xd, squeeze = _as_batch(x, "maxpool2d")
    n, c, h, w = xd.shape
    ho = _out_extent(h, kernel, stride, padding, 1)
    wo = _out_extent(w, kernel, stride, padding, 1)
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"maxpool2d: output extent {ho}×{wo} from input {h}×{w}")
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    offsets = [(i, j) for i in range(kernel) for j in range(kernel)]
    stack = np.stack(
        [xp[:, :, i:i + span_h:stride, j:j + span_w:stride] for i, j in offsets]
    )
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw(g):
        if squeeze:
            g = g[None]
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for q, (i, j) in enumerate(offsets):
            gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += np.where(arg == q, g, 0)
        gx = gxp[:, :, p:p + h, p:p + w]
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (x,), bw, "maxpool2d")


def interpolation_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """dst×src linear interpolation weights, half-pixel (align-corners-false) convention."""
    if src == dst:
        return np.eye(dst, dtype=dtype)
    scale = src / dst
    pos = np.maximum((np.arange(dst) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(pos).astype(int), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = np.where(hi == lo, 0.0, pos - lo)
    m = np.zeros((dst, src), dtype=dtype)
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    h2, w2 = size
    if h2 < 1 or w2 < 1:
        raise ConfigError(f"resize_bilinear: target extents must be positive, got {size}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"resize_bilinear: expected c×h×w or n×c×h×w input, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (h2, w2):
        return _make(x.data, (x,), lambda g: (g,), "resize_identity")
    ry = interpolation_matrix(h, h2, x.dtype)
    rx = interpolation_matrix(w, w2, x.dtype)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,), "resize_bilinear")


# ---------------------------------------------------------------------------
# finite-difference check

def gradcheck(f: Callable[..., Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map its inputs to a scalar tensor.  Inputs are copied to
    double precision before checking.  Per-element error is
    ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    xs = [x] if isinstance(x, (Tensor, np.ndarray)) else list(x)
    leaves = [
        Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64), requires_grad=True) for t in xs
    ]
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"gradcheck: function must be scalar-valued, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    worst = 0.0
    with no_grad():
        for leaf in leaves:
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            ga = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*leaves).item()
                flat[i] = orig - eps
                fm = f(*leaves).item()
                flat[i] = orig
                gfd = (fp - fm) / (2 * eps)
                err = abs(ga[i] - gfd) / max(1e-8, abs(ga[i]) + abs(gfd))
                worst = max(worst, err)
    return worst
