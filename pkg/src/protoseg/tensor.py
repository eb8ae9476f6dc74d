"""Minimal dense-tensor engine with reverse-mode autodiff, backed by numpy.

Only the operations the rest of the package needs are implemented. Tensors
are double precision by default; single precision is used by the benchmark
harness. The tape is built per forward pass and supports first-order
gradients only.
"""

from contextlib import contextmanager

import numpy as np


class NonFiniteError(ValueError):
    """Raised when an operation on finite inputs produces NaN/Inf."""


_FINITE_CHECKS = True


@contextmanager
def finite_checks(enabled):
    """Toggle NaN/Inf detection on op outputs (off inside benchmarks)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(data, opname):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{opname}'")


class Tensor:
    """Dense N-d array with optional gradient tracking.

    grad accumulates across backward() calls until zero_grad().
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward, opname):
        _check_finite(data, opname)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar; fills grad on reachable tensors."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._make(data, (a, b), backward, "div")


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return Tensor._make(data, (x,), backward, "exp")


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor._make(data, (x,), backward, "log")


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return Tensor._make(data, (x,), backward, "sqrt")


def square(x):
    return mul(x, x)


# -- shape ------------------------------------------------------------------


def reshape(x, *shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(old))

    return Tensor._make(data, (x,), backward, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return Tensor._make(data, (x,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(data, tuple(tensors), backward, "concat")


def gather_rows(x, indices):
    """Select rows of a 2-d tensor; gradient scatter-adds into x."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return Tensor._make(data, (x,), backward, "gather_rows")


# -- reductions -------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return Tensor._make(data, (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape) / n)

    return Tensor._make(data, (x,), backward, "mean")


def reduce_max(x, axis, keepdims=False):
    """Max along one axis; subgradient flows to the first maximal element."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("max over an empty axis")
    idx = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        x._accumulate(gx)

    return Tensor._make(data, (x,), backward, "max")


def l2_norm(x, axis, keepdims=False, eps=0.0):
    """Euclidean norm along an axis, with eps added inside the square root."""
    return sqrt(reduce_sum(square(x), axis, keepdims) + eps)


def argmax_axis(x, axis):
    """Non-differentiable argmax; ties break to the lowest index."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("argmax over an empty axis")
    return np.argmax(x.data, axis=axis)


# -- activations ------------------------------------------------------------


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x._accumulate(g * data * (1.0 - data))

    return Tensor._make(data, (x,), backward, "sigmoid")


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._make(data, (x,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximation GELU."""
    x = as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    data = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner
        x._accumulate(g * grad)

    return Tensor._make(data, (x,), backward, "gelu")


def softmax(x, axis=-1, additive_mask=None):
    """Numerically stable softmax along `axis`.

    additive_mask is an optional constant array of {0, -inf} added to the
    logits. Slices that are fully masked fall back to an unmasked softmax.
    """
    x = as_tensor(x)
    z = x.data
    if additive_mask is not None:
        # detect fully-masked slices on the mask's own (unbroadcast) shape
        m = np.asarray(additive_mask)
        all_masked = np.all(np.isneginf(m), axis=axis, keepdims=True)
        if all_masked.any():
            m = np.where(all_masked, 0.0, m)
        z = z + m
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    return Tensor._make(data, (x,), backward, "softmax")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product; supports batched leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        both_vec = a.ndim == 1 and b.ndim == 1
        if a.requires_grad:
            if both_vec:
                ga = g * b.data
            else:
                ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if both_vec:
                gb = g * a.data
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._make(data, (a, b), backward, "matmul")


# -- convolution and sampling ----------------------------------------------


def _im2col(xp, k, stride, h_out, w_out):
    c = xp.shape[0]
    cols = np.empty((c * k * k, h_out * w_out), dtype=xp.dtype)
    row = 0
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride]
            cols[row * c:(row + 1) * c] = patch.reshape(c, -1)
            row += 1
    return cols


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-d cross-correlation. x: [C_in,H,W], w: [C_out,C_in,k,k], b: [C_out]."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    c_out, c_in, k, k2 = w.shape
    if k != k2 or c_in != x.shape[0]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    h, wd = x.shape[1], x.shape[2]
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # taps are ordered (ki, kj) row-major; backward relies on the same order
    cols = _im2col(xp, k, stride, h_out, w_out)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(c_out, -1)  # [C_out, k*k*C_in]
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    data = out.reshape(c_out, h_out, w_out)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(c_out, -1)
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            gcols = wmat.T @ gmat
            gxp = np.zeros_like(xp)
            row = 0
            for ki in range(k):
                for kj in range(k):
                    patch = gcols[row * c_in:(row + 1) * c_in].reshape(c_in, h_out, w_out)
                    gxp[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride] += patch
                    row += 1
            x._accumulate(gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp)

    return Tensor._make(data, parents, backward, "conv2d")


def bilinear_sample(x, points):
    """Sample x: [C,H,W] at continuous (row, col) points: [P,2] -> [C,P].

    Out-of-bounds reads return 0 (zero padding). Differentiable in both
    x and points.
    """
    x, points = as_tensor(x), as_tensor(points)
    c, h, w = x.shape
    r, col = points.data[:, 0], points.data[:, 1]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    wr = r - r0
    wc = col - c0

    def fetch(ri, ci):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        v = x.data[:, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        return v * valid, valid

    v00, m00 = fetch(r0, c0)
    v01, m01 = fetch(r0, c0 + 1)
    v10, m10 = fetch(r0 + 1, c0)
    v11, m11 = fetch(r0 + 1, c0 + 1)
    w00 = (1 - wr) * (1 - wc)
    w01 = (1 - wr) * wc
    w10 = wr * (1 - wc)
    w11 = wr * wc
    data = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for v, m, ww, ri, ci in (
                (v00, m00, w00, r0, c0),
                (v01, m01, w01, r0, c0 + 1),
                (v10, m10, w10, r0 + 1, c0),
                (v11, m11, w11, r0 + 1, c0 + 1),
            ):
                contrib = g * ww * m
                np.add.at(gx, (slice(None), np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)), contrib)
            x._accumulate(gx)
        if points.requires_grad:
            dr = (v10 - v00) * (1 - wc) + (v11 - v01) * wc
            dc = (v01 - v00) * (1 - wr) + (v11 - v10) * wr
            gp = np.stack([(g * dr).sum(axis=0), (g * dc).sum(axis=0)], axis=1)
            points._accumulate(gp)

    return Tensor._make(data, (x, points), backward, "bilinear_sample")


def resize_bilinear(x, out_hw):
    """Bilinear resize of x: [C,H,W] to [C,H2,W2] (half-pixel centers, edges clamped)."""
    x = as_tensor(x)
    c, h, w = x.shape
    h2, w2 = out_hw
    if h2 <= 0 or w2 <= 0:
        raise ValueError("target resolution must be positive")
    rs = np.clip((np.arange(h2) + 0.5) * (h / h2) - 0.5, 0, h - 1)
    cs = np.clip((np.arange(w2) + 0.5) * (w / w2) - 0.5, 0, w - 1)
    r0 = np.minimum(np.floor(rs).astype(np.int64), h - 2) if h > 1 else np.zeros(h2, np.int64)
    c0 = np.minimum(np.floor(cs).astype(np.int64), w - 2) if w > 1 else np.zeros(w2, np.int64)
    wr = (rs - r0)[None, :, None]
    wc = (cs - c0)[None, None, :]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)

    def take(ri, ci):
        return x.data[:, ri[:, None], ci[None, :]]

    data = (take(r0, c0) * (1 - wr) * (1 - wc) + take(r0, c1) * (1 - wr) * wc
            + take(r1, c0) * wr * (1 - wc) + take(r1, c1) * wr * wc)

    def backward(g):
        gx = np.zeros_like(x.data)
        for ri, ci, ww in ((r0, c0, (1 - wr) * (1 - wc)), (r0, c1, (1 - wr) * wc),
                           (r1, c0, wr * (1 - wc)), (r1, c1, wr * wc)):
            rr = np.broadcast_to(ri[:, None], (h2, w2)).ravel()
            cc = np.broadcast_to(ci[None, :], (h2, w2)).ravel()
            contrib = (g * ww).reshape(c, -1)
            np.add.at(gx, (slice(None), rr, cc), contrib)
        x._accumulate(gx)

    return Tensor._make(data, (x,), backward, "resize_bilinear")


__all__ = [
    "Tensor", "NonFiniteError", "finite_checks", "as_tensor",
    "add", "sub", "mul", "div", "exp", "log", "sqrt", "square",
    "reshape", "transpose", "concat", "gather_rows",
    "reduce_sum", "reduce_mean", "reduce_max", "l2_norm", "argmax_axis",
    "sigmoid", "relu", "gelu", "softmax",
    "matmul", "conv2d", "bilinear_sample", "resize_bilinear",
]
