"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the capsule autoencoder are provided. Every op
works on numpy arrays with arbitrary leading batch dimensions and records a
backward rule on the active :class:`Tape` when at least one input requires a
gradient. Outside a tape context ops simply compute values.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import numpy as np

from .exceptions import (
    ConfigurationError,
    ContractError,
    DimensionError,
    InputError,
    NonFiniteError,
    TapeError,
)

_DEFAULT_DTYPE = np.float64
_ACTIVE_TAPES: list["Tape"] = []


def set_default_dtype(dtype):
    """Set the float dtype used for tensors built from python data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def current_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._is_leaf = True

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. The log is only emptied by :meth:`clear`.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        for rec in self.records:
            rec.out._tape = None
        self.records = []

    def record(self, out, inputs, backward, op):
        self.records.append(_Record(out, inputs, backward, op))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        if loss._tape is not self:
            raise TapeError("loss is not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(data, inputs, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out._is_leaf = False
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _emit(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def relu(a):
    """max(0, x); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(a, beta=1.0):
    """x * sigmoid(beta * x)."""
    a = as_tensor(a)
    s = _sigmoid(beta * a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + beta * a.data * s * (1.0 - s)),)

    return _emit(out, (a,), backward, "swish")


# reductions and shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in _normalize_axes(axis, a.ndim)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def _normalize_axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def getitem(a, index):
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(a.data[index]), (a,), backward, "getitem")


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with at least two dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(a.data @ b.data, (a, b), backward, "matmul")


def einsum(subscripts, *operands):
    """np.einsum with explicit output subscripts and no ellipsis."""
    operands = tuple(as_tensor(t) for t in operands)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands) or "." in subscripts:
        raise ContractError(f"bad einsum subscripts {subscripts!r}")
    for s, t in zip(in_subs, operands):
        if len(s) != t.ndim or len(set(s)) != len(s):
            raise DimensionError(f"einsum operand {s!r} does not match shape {t.shape}")
    data = np.einsum(subscripts, *(t.data for t in operands), optimize=True)

    def backward(g):
        grads = []
        for k, (sk, tk) in enumerate(zip(in_subs, operands)):
            if not tk.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != k]
            seen = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in sk if c in seen)
            expr = ",".join([out_sub] + others) + "->" + kept
            gk = np.einsum(expr, g, *(operands[j].data for j in range(len(operands)) if j != k),
                           optimize=True)
            if kept != sk:
                for pos, c in enumerate(sk):
                    if c not in seen:
                        gk = np.expand_dims(gk, pos)
                gk = np.broadcast_to(gk, tk.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _emit(data, operands, backward, "einsum")


# fused nonlinearities -----------------------------------------------------

def softmax(a, axis=-1):
    """Softmax with max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), backward, "softmax")


SQUASH_EPS = 1e-9


def squash(a, axis=-1, eps=SQUASH_EPS):
    """Scale vectors to norm |s|^2/(1+|s|^2) keeping direction.

    The norm in the denominator is sqrt(|s|^2 + eps) so the map and its
    derivative stay finite at the origin.
    """
    a = as_tensor(a)
    s = a.data
    n2 = (s * s).sum(axis=axis, keepdims=True)
    h = 1.0 / ((1.0 + n2) * np.sqrt(n2 + eps))
    f = n2 * h
    out = f * s

    def backward(g):
        df = h * (1.0 - n2 / (1.0 + n2) - n2 / (2.0 * (n2 + eps)))
        sg = (s * g).sum(axis=axis, keepdims=True)
        return (f * g + 2.0 * df * sg * s,)

    return _emit(out, (a,), backward, "squash")


def vector_norm(a, axis=-1, eps=1e-12):
    """sqrt(sum(x^2) + eps) along ``axis``."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis) + eps)

    def backward(g):
        return (np.expand_dims(g / n, axis) * a.data,)

    return _emit(n, (a,), backward, "norm")


# convolutions -------------------------------------------------------------

def conv1d_feature(x, kernels, bias=None):
    """Full-feature-width 1D convolution applied to every row independently.

    ``x`` is ``(..., C, F)``, ``kernels`` is ``(K, 1, F)`` and ``bias`` is
    ``(K,)``; the result is ``(..., C, K)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or kernels.shape[1] != 1:
        raise DimensionError(f"kernels must be (K, 1, F), got {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise DimensionError(f"kernel width {kernels.shape[2]} != feature width {x.shape[-1]}")
    k = kernels.shape[0]
    out = matmul(x, transpose(reshape(kernels, (k, kernels.shape[2])), (1, 0)))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise DimensionError(f"bias must be ({k},), got {bias.shape}")
        out = out + bias
    return out


def conv_output_width(width, kernel, stride, padding=0):
    return (width - kernel + 2 * padding) // stride + 1


def conv2d_strided(x, kernels, stride, bias=None):
    """Height-1 2D convolution with kernel width == stride.

    ``x`` is ``(..., W, 1)``, ``kernels`` is ``(K, 1, n)``; output is
    ``(..., W/n, K)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.shape[-1] != 1:
        raise DimensionError(f"expected a single input channel, got {x.shape}")
    if kernels.ndim != 3 or kernels.shape[1] != 1:
        raise DimensionError(f"kernels must be (K, 1, n), got {kernels.shape}")
    k, n = kernels.shape[0], kernels.shape[2]
    if n != stride:
        raise DimensionError(f"kernel width {n} must equal stride {stride}")
    width = x.shape[-2]
    if width % n:
        raise DimensionError(f"width {width} not divisible by stride {n}")
    w_out = conv_output_width(width, n, n)
    windows = reshape(x, x.shape[:-2] + (w_out, n))
    out = matmul(windows, transpose(reshape(kernels, (k, n)), (1, 0)))
    if bias is not None:
        out = out + as_tensor(bias)
    return out


def deconv_width(x, weight, stride, bias=None):
    """Transposed convolution along the width axis.

    ``x`` is ``(..., W, C_in)`` and ``weight`` is ``(C_in, kernel, C_out)``.
    Supported: kernel == stride (non-overlapping), or kernel 1 with stride 1.
    Output is ``(..., W*stride, C_out)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3:
        raise DimensionError(f"weight must be (C_in, kernel, C_out), got {weight.shape}")
    c_in, kernel, c_out = weight.shape
    if kernel != stride:
        raise ConfigurationError(f"unsupported deconv kernel {kernel} with stride {stride}")
    if x.shape[-1] != c_in:
        raise DimensionError(f"input channels {x.shape[-1]} != weight channels {c_in}")
    width = x.shape[-2]
    out = matmul(x, reshape(weight, (c_in, kernel * c_out)))
    out = reshape(out, x.shape[:-2] + (width * stride, c_out))
    if bias is not None:
        out = out + as_tensor(bias)
    return out


# losses --------------------------------------------------------------------

def chamfer(x, y):
    """Symmetric Chamfer distance between point sets.

    ``x`` is ``(..., N, D)`` and ``y`` is ``(..., M, D)``; returns one value
    per leading index. Nearest-neighbour ties go to the lowest index.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-2] == 0 or y.shape[-2] == 0:
        raise InputError("chamfer distance of an empty cloud")
    xx = (x.data * x.data).sum(-1)
    yy = (y.data * y.data).sum(-1)
    cross = x.data @ np.swapaxes(y.data, -1, -2)
    d2 = np.maximum(xx[..., :, None] + yy[..., None, :] - 2.0 * cross, 0.0)
    nn_xy = d2.argmin(-1)  # for each x, nearest y
    nn_yx = d2.argmin(-2)  # for each y, nearest x
    # exact distances of the selected pairs
    d_xy = ((x.data - np.take_along_axis(y.data, nn_xy[..., None], -2)) ** 2).sum(-1)
    d_yx = ((y.data - np.take_along_axis(x.data, nn_yx[..., None], -2)) ** 2).sum(-1)
    n, m = x.shape[-2], y.shape[-2]
    out = d_xy.mean(-1) + d_yx.mean(-1)

    def backward(g):
        g = np.asarray(g)[..., None, None]
        y_near = np.take_along_axis(y.data, nn_xy[..., None], -2)
        x_near = np.take_along_axis(x.data, nn_yx[..., None], -2)
        r_xy = g * (2.0 / n) * (x.data - y_near)
        r_yx = g * (2.0 / m) * (y.data - x_near)
        # each selected nearest neighbour receives the opposite pull
        dim = x.shape[-1]
        flat = int(np.prod(x.shape[:-2], dtype=int))
        gx = r_xy.copy().reshape(flat * n, dim)
        gy = r_yx.copy().reshape(flat * m, dim)
        idx_y = (nn_xy.reshape(flat, n) + m * np.arange(flat)[:, None]).ravel()
        idx_x = (nn_yx.reshape(flat, m) + n * np.arange(flat)[:, None]).ravel()
        np.add.at(gy, idx_y, -r_xy.reshape(flat * n, dim))
        np.add.at(gx, idx_x, -r_yx.reshape(flat * m, dim))
        return gx.reshape(x.shape), gy.reshape(y.shape)

    return _emit(np.asarray(out), (x, y), backward, "chamfer")


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b
