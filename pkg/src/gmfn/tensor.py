"""NCHW tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation in
this module returns a new Tensor that remembers its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` sorts the
graph reachable from a scalar loss into a :class:`Tape` (parents before
children) and walks it once in reverse.

Gradients are returned in a dict keyed by the leaf Tensor objects; nothing is
written onto the tensors, so backward passes over separate graphs cannot
interfere with each other.

Convolutions unfold the padded input into columns (kernel offsets ``(i, j)``
in row-major order), contract with one matrix product, and fold gradients
back with the same offset loop. The order is fixed, so results are
reproducible for a fixed input and BLAS setup.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_PRECISIONS = {"single": np.float32, "double": np.float64,
               "float32": np.float32, "float64": np.float64}
_dtype = np.float32


def get_dtype():
    """Current global floating point type for new tensors."""
    return _dtype


def set_precision(name: str) -> None:
    """Switch the global precision (``"single"`` or ``"double"``)."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ConfigError(f"unknown precision {name!r}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision."""
    global _dtype
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = previous


class Tensor:
    """Array node in a differentiation graph.

    Leaf tensors are created directly; non-leaf tensors come out of the
    operations below and carry ``_parents`` plus ``_backward``, which maps
    the output gradient to a tuple of parent gradients.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def abs(self):
        return absolute(self)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Build an op output; only record the graph when some parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered nodes reachable from an output tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, out: Tensor, seed: np.ndarray) -> dict:
        grads = {id(out): seed}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss with respect to every reachable leaf.

    Returns ``{leaf_tensor: ndarray}``. Leaves with ``requires_grad=True``
    that the loss does not depend on are absent from the map.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_output(loss)
    return tape.run(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(x: Tensor, y) -> Tensor:
    if not isinstance(y, Tensor):
        c = float(y)
        return _result(x.data + c, (x,), lambda g: (g,), "add_scalar")
    _check_same_shape(x, y, "add")
    return _result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x: Tensor, y) -> Tensor:
    if not isinstance(y, Tensor):
        c = float(y)
        return _result(x.data - c, (x,), lambda g: (g,), "sub_scalar")
    _check_same_shape(x, y, "sub")
    return _result(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def mul_scalar(x: Tensor, c) -> Tensor:
    if isinstance(c, Tensor):
        raise TypeError("only multiplication by a Python scalar is supported")
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape

    def _backward(g):
        return (np.full(shape, g / n, dtype=x.data.dtype),)

    return _result(x.data.mean(dtype=np.float64).astype(x.data.dtype), (x,), _backward, "mean")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    """``mean(|x - y|)`` as a scalar tensor."""
    return mean(absolute(sub(x, y)))


# ---------------------------------------------------------------------------
# Activation and channel concat
# ---------------------------------------------------------------------------

def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    if alpha.ndim != 1 or x.ndim < 2 or alpha.shape[0] != x.shape[1]:
        raise ShapeError(f"prelu: alpha shape {alpha.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    a = alpha.data.reshape(bshape)
    neg_mask = x.data < 0
    out = np.where(neg_mask, a * x.data, x.data)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def _backward(g):
        gx = np.where(neg_mask, g * a, g)
        ga = (g * x.data * neg_mask).sum(axis=reduce_axes)
        return gx, ga

    return _result(out, (x, alpha), _backward, "prelu")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: {t.shape} does not match batch/spatial dims of {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return _result(np.concatenate([t.data for t in xs], axis=1), xs, _backward, "concat")


def channel_ranges(xs: Sequence[Tensor]) -> list:
    """``(start, stop)`` channel range of each input inside ``concat_channels(xs)``."""
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    return [(int(bounds[k]), int(bounds[k + 1])) for k in range(len(xs))]


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvGeometry:
    kernel: tuple
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"invalid geometry stride={self.stride} padding={self.padding}")

    def out_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)

    def transposed_out_size(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        return ((h - 1) * self.stride - 2 * self.padding + kh,
                (w - 1) * self.stride - 2 * self.padding + kw)


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow), offsets in row-major order."""
    n, c = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n, c, oh * ow)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, c, kh, kw, stride, oh, ow, hp, wp):
    """Adjoint of :func:`_im2col`: scatter-add columns back into an image."""
    n = cols.shape[0]
    if kh == kw == 1 and stride == 1:
        return cols.reshape(n, c, hp, wp)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    return out


def _pad(a, p):
    if p == 0:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p:p + h, p:p + w] = a
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``w`` has layout ``(out_channels, in_channels, kh, kw)``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels (axis 1) {c} != weight in_channels (axis 1) {ci}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)")
    geom = ConvGeometry((kh, kw), stride, padding)
    oh, ow = geom.out_size(h, wd)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output size {(oh, ow)} for input {(h, wd)}, kernel {(kh, kw)}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, oh, ow)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def _backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gxp = _col2im(np.matmul(w2.T, g2), c, kh, kw, stride, oh, ow, xp.shape[2], xp.shape[3])
        grads = (gxp[:, :, padding:padding + h, padding:padding + wd], gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _backward, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d` w.r.t. its input).

    ``w`` has layout ``(in_channels, out_channels, kh, kw)``; the output side
    is ``(H - 1) * stride - 2 * padding + kh``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input channels (axis 1) {c} != weight in_channels (axis 0) {ci}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({o},)")
    geom = ConvGeometry((kh, kw), stride, padding)
    oh, ow = geom.transposed_out_size(h, wd)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {(oh, ow)}")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    w2 = w.data.reshape(c, -1)
    x2 = x.data.reshape(n, c, h * wd)
    full = _col2im(np.matmul(w2.T, x2), o, kh, kw, stride, h, wd, hf, wf)
    out = np.ascontiguousarray(full[:, :, padding:padding + oh, padding:padding + ow])
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def _backward(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        gcols = _im2col(gfull, kh, kw, stride, h, wd)
        gx = np.matmul(w2, gcols).reshape(x.shape)
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, _backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# Bilinear resize
# ---------------------------------------------------------------------------

def bilinear_matrix(n_in: int, scale: int, dtype=None) -> np.ndarray:
    """Row-stochastic ``(scale*n_in, n_in)`` interpolation matrix.

    Output sample ``i`` reads the input at ``(i + 0.5) / scale - 0.5``,
    clamped at zero; the upper neighbour index is clamped at ``n_in - 1``.
    """
    m = np.zeros((scale * n_in, n_in), dtype=dtype or _dtype)
    for i in range(scale * n_in):
        src = max((i + 0.5) / scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: Tensor, scale: int) -> Tensor:
    """Non-learnable bilinear upsampling by an integer factor in {2, 3, 4}."""
    if scale not in (2, 3, 4):
        raise ConfigError(f"bilinear_resize: unsupported scale {scale!r}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected NCHW input, got {x.shape}")
    rh = bilinear_matrix(x.shape[2], scale, x.data.dtype)
    rw = bilinear_matrix(x.shape[3], scale, x.data.dtype)
    out = rh @ x.data @ rw.T

    def _backward(g):
        return (rh.T @ g @ rw,)

    return _result(out, (x,), _backward, "bilinear_resize")
