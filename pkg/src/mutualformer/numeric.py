"""Dense float64 tensors, fixed-order kernels and tape-based reverse-mode gradients.

Every tensor is immutable after construction. Differentiable operations record
themselves on the innermost active :class:`Tape`; ``Tape.backward`` replays the
records in reverse order and returns gradients for the requested parameters.

Matrix products go through a compiled triple loop whose accumulation order over
the inner dimension is fixed (k = 0, 1, ...), with no fused multiply-add, so a
product is bit-identical to the textbook loop and to itself across runs.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from scipy.special import expit

from .errors import DegenerateSimilarityError, NonFiniteError, ShapeError, UsageError

__all__ = [
    "Tensor", "Tape", "as_tensor", "parameter",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "permute", "reshape",
    "concat", "take", "sum", "mean", "exp", "log", "sigmoid", "relu", "gelu",
    "clip", "softmax_rows", "sym_normalize", "layer_norm", "linear", "concat_cols",
    "conv2d", "resize_bilinear", "fixed_matmul",
]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------- kernels

@numba.njit(cache=True)
def _mm2(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]


@numba.njit(cache=True)
def _mm3(a, b, out):
    nb, m, kk = a.shape
    n = b.shape[2]
    for t in range(nb):
        for i in range(m):
            for k in range(kk):
                aik = a[t, i, k]
                for j in range(n):
                    out[t, i, j] += aik * b[t, k, j]


def fixed_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-array product with fixed summation order.

    Accepts (m,k)@(k,n), (...,m,k)@(k,n) and (...,m,k)@(...,k,n) with equal
    leading dimensions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = np.ascontiguousarray(a.reshape(-1, a.shape[-1]))
        out = np.zeros((a2.shape[0], b.shape[1]))
        _mm2(a2, np.ascontiguousarray(b), out)
        return out.reshape(lead + (b.shape[1],))
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}")
    lead = a.shape[:-2]
    a3 = np.ascontiguousarray(a.reshape((-1,) + a.shape[-2:]))
    b3 = np.ascontiguousarray(b.reshape((-1,) + b.shape[-2:]))
    out = np.zeros((a3.shape[0], a3.shape[1], b3.shape[2]))
    _mm3(a3, b3, out)
    return out.reshape(lead + (a.shape[-2], b.shape[-1]))


# --------------------------------------------------------------------------- tensor & tape

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Immutable float64 array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} has non-finite entries")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, opname: str) -> "Tensor":
        # fresh arrays only: skip the defensive copy
        arr = np.asarray(arr, dtype=np.float64)  # array scalars -> 0-d arrays
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{opname} produced non-finite values")
        arr.flags.writeable = False
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    # array protocol
    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != self.data.dtype:
            return self.data.astype(dtype)
        return self.data.copy() if copy else self.data

    def numpy(self) -> np.ndarray:
        return self.data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block on
    tensors that require gradients are recorded here.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, wrt=None):
        """Reverse sweep from a scalar ``loss``.

        ``wrt`` may be a sequence of tensors (a list of gradients is returned)
        or a mapping name -> tensor (a dict name -> gradient is returned).
        Parameters the loss does not depend on get exact zeros.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise UsageError(f"backward needs a scalar loss, got shape {shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if wrt is None:
            return grads
        if isinstance(wrt, dict):
            return {k: grads.get(id(p), np.zeros_like(p.data)) for k, p in wrt.items()}
        return [grads.get(id(p), np.zeros_like(p.data)) for p in wrt]


def _emit(arr: np.ndarray, inputs: tuple, vjp, opname: str) -> Tensor:
    out = Tensor._wrap(arr, opname)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit(out, (a,), lambda g: (g / ad,), "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    Evaluated as x * sigmoid(2u), which equals the tanh form but keeps full
    precision in the negative tail where 1 + tanh(u) cancels.
    """
    a = as_tensor(a)
    x = a.data
    s = expit(2.0 * _GELU_C * (x + 0.044715 * (x * x * x)))
    out = x * s

    def vjp(g):
        d = s + x * (2.0 * s * (1.0 - s)) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _emit(out, (a,), vjp, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = fixed_matmul(ad, bd)

    def vjp(g):
        ga = fixed_matmul(g, _swap(bd)) if bd.ndim > 2 else fixed_matmul(g, bd.T)
        if bd.ndim == 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = fixed_matmul(a2.T, g.reshape(-1, g.shape[-1]))
        else:
            gb = fixed_matmul(_swap(ad), g)
        return ga, gb

    return _emit(out, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.ascontiguousarray(_swap(a.data)), (a,), lambda g: (_swap(g),), "transpose")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                 lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _emit(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape)
        z[idx] = g
        return (z,)

    return _emit(np.array(a.data[idx]), (a,), vjp, "take")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_cols: row shapes differ, {a.shape} and {b.shape}")
    return concat([a, b], axis=-1)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# --------------------------------------------------------------------------- matrix kernels

def softmax_rows(m) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    m = as_tensor(m)
    if m.size == 0:
        raise ShapeError("softmax_rows: empty input")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (m,), vjp, "softmax_rows")


def sym_normalize(s) -> Tensor:
    """D^-1/2 S D^-1/2 with D the diagonal of row sums (last two axes)."""
    s = as_tensor(s)
    sd = s.data
    if sd.ndim < 2 or sd.shape[-1] != sd.shape[-2]:
        raise ShapeError(f"sym_normalize: expected square matrices, got {sd.shape}")
    if np.any(sd < 0):
        raise DegenerateSimilarityError("sym_normalize: negative similarity entries")
    d = sd.sum(axis=-1)
    if np.any(d <= 0):
        raise DegenerateSimilarityError("sym_normalize: zero row sum")
    r = 1.0 / np.sqrt(d)
    out = sd * r[..., :, None] * r[..., None, :]

    def vjp(g):
        gs = g * r[..., :, None] * r[..., None, :]
        # d out_ij / d r_i and d r_j, then r = d^-1/2 and d_i = sum_k s_ik
        gr = (g * sd * r[..., None, :]).sum(axis=-1) + (g * sd * r[..., :, None]).sum(axis=-2)
        gd = gr * (-0.5) * r ** 3
        return (gs + gd[..., :, None],)

    return _emit(out, (s,), vjp, "sym_normalize")


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    w = x.shape[-1]
    if gain.shape != (w,) or bias.shape != (w,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {w}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(out, (x, gain, bias), vjp, "layer_norm")


def linear(x, w, b=None) -> Tensor:
    """x @ w + b."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return y + b


# --------------------------------------------------------------------------- image ops

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (B, H, W, C) maps with weights (kh, kw, C, O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, o)
    out = fixed_matmul(cols, wmat).reshape(bsz, ho, wo, o)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} vs {o} output channels")
        out = out + b.data
        inputs = (x, w, b)
    pshape = xp.shape

    def vjp(g):
        g2 = g.reshape(-1, o)
        gw = fixed_matmul(cols.T, g2).reshape(w.shape)
        gcols = fixed_matmul(g2, wmat.T).reshape(bsz, ho, wo, kh, kw, c)
        gxp = np.zeros(pshape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i: i + stride * (ho - 1) + 1: stride,
                    j: j + stride * (wo - 1) + 1: stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding: padding + h, padding: padding + wd, :]
        res = (np.ascontiguousarray(gx), gw)
        return res + (g2.sum(axis=0),) if len(inputs) == 3 else res

    return _emit(out, inputs, vjp, "conv2d")


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    r = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        r[i, i0] += 1.0 - f
        r[i, i1] += f
    return r


def resize_bilinear(x, size) -> Tensor:
    """Bilinear resampling of (B, H, W, C) maps, half-pixel centres, no antialiasing."""
    x = as_tensor(x)
    _, h, w, _ = x.shape
    rh = _interp_matrix(size[0], h)
    rw = _interp_matrix(size[1], w)
    out = np.einsum("ih,bhwc->biwc", rh, x.data)
    out = np.einsum("jw,biwc->bijc", rw, out)

    def vjp(g):
        gi = np.einsum("jw,bijc->biwc", rw, g)
        return (np.einsum("ih,biwc->bhwc", rh, gi),)

    return _emit(np.ascontiguousarray(out), (x,), vjp, "resize_bilinear")
