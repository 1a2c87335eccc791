"""Reverse-mode automatic differentiation on dense float64 arrays.

A small computation-graph engine in the micrograd tradition: each operation
returns a new :class:`Tensor` carrying a closure that pushes gradients to its
parents, and ``backward`` walks the graph in reverse topological order.  All
buffers are numpy float64 arrays; reductions inherit numpy's fixed, platform-
independent summation order, so a fixed seed gives a bit-identical trajectory
across runs.

Every tensor created by an op is checked for NaN/Inf, and so is every gradient
produced during the backward pass; a violation raises :class:`NumericFault`
naming the offending op.  This trades a little throughput for never letting a
bad值 propagate silently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractViolation",
    "NumericFault",
    "Tensor",
    "forward_backward",
    "add", "sub", "mul", "div", "neg", "pow_scalar",
    "exp", "log", "sqrt", "relu", "sigmoid", "softplus", "clip",
    "matmul", "tsum", "tmean", "reshape", "transpose", "concat",
    "take_rows", "roll", "conv2d", "conv_transpose2d", "batch_norm2d",
    "masked_logsumexp_rows",
]


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericFault(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a backward gradient."""


def _check_finite(arr: np.ndarray, op: str, phase: str = "forward") -> None:
    # a single fused reduction: any NaN/Inf in arr makes the sum non-finite
    # (inf pairs of opposite sign cancel to NaN), and legitimate values are
    # far too small to overflow the sum at desk scale
    if not np.isfinite(float(arr.sum())):
        raise NumericFault(f"non-finite values produced by op '{op}' during {phase}")


# data-movement ops and bounded functions cannot create non-finite values
# from finite inputs, so their outputs skip the finite check
_SAFE_OPS = frozenset({
    "detach", "neg", "relu", "clip", "sigmoid", "softplus",
    "reshape", "transpose", "concat", "getitem", "take_rows", "roll",
})


class Tensor:
    """Dense float64 array with optional gradient-tape participation.

    ``data`` is the value buffer, ``grad`` (same shape) accumulates gradients
    across ``backward`` calls until explicitly zeroed.  Interior nodes keep
    references to their parents plus a backward closure; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        if op not in _SAFE_OPS:
            _check_finite(self.data, op)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(_parents)
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The root must be a scalar.  Gradients accumulate across repeated calls
        until ``zero_grad``.
        """
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() requires a scalar root, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, node.op, "backward")
            if node._backward is None:
                # leaf: persist (and accumulate across backward calls)
                node.grad = g.copy() if node.grad is None else node.grad + g
            else:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor):
    """Reverse topological order (root first), iterative to spare the stack."""
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, op, backward):
    """Build an op result; the graph is only recorded when a parent needs it."""
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, op=op,
                 _parents=tuple(p for p in parents if p.requires_grad) if requires else ())
    if requires:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data * b.data
    return _make(out_data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((a, _unbroadcast(g / b.data, a.shape)),
                    (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return _make(out_data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, -g),)
    return _make(-a.data, (a,), "neg", backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractViolation("pow supports constant exponents only")
    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((a, g * p * a.data ** (p - 1)),)
    with np.errstate(invalid="ignore"):
        out_data = a.data ** p
    return _make(out_data, (a,), f"pow{p}", backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    def backward(g):
        return ((a, g * out_data),)
    return _make(out_data, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((a, g / a.data),)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _make(out_data, (a,), "log", backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return ((a, g * 0.5 / out_data),)
    return _make(out_data, (a,), "sqrt", backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)
    def backward(g):
        return ((a, g * (out_data > 0)),)
    return _make(out_data, (a,), "relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    def backward(g):
        return ((a, g * out_data * (1.0 - out_data)),)
    return _make(out_data, (a,), "sigmoid", backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed as max(a,0) + log1p(exp(-|a|))."""
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    def backward(g):
        return ((a, g * sig),)
    return _make(out_data, (a,), "softplus", backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    def backward(g):
        return ((a, g * inside),)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", backward)


# -- linear algebra and shape ops -----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))
    return _make(a.data @ b.data, (a, b), "matmul", backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)

    def backward(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return ((a, np.broadcast_to(g, a.shape).copy()),)
    return _make(a.data.sum(axis=axes if axis is not None else None, keepdims=keepdims),
                 (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return ((a, g.reshape(a.shape)),)
    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)
    def backward(g):
        return ((a, g.transpose(inverse)),)
    return _make(a.data.transpose(axes), (a,), "transpose", backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple((t, piece) for t, piece in zip(tensors, pieces))
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, "concat", backward)


def getitem(a: Tensor, key) -> Tensor:
    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, key, g)
        return ((a, da),)
    return _make(a.data[key], (a,), "getitem", backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by integer index along axis 0 (scatter-add on backward)."""
    idx = np.asarray(idx, dtype=np.intp)
    def backward(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return ((a, da),)
    return _make(a.data[idx], (a,), "take_rows", backward)


def roll(a: Tensor, shift: int, axis: int = 0) -> Tensor:
    def backward(g):
        return ((a, np.roll(g, -shift, axis=axis)),)
    return _make(np.roll(a.data, shift, axis=axis), (a,), "roll", backward)


# -- structured ops for conv nets ------------------------------------------
# Convolutions run internally in channels-last layout: the col2im scatter
# loops then add over a contiguous channel axis, which is several times
# faster than strided NCHW slices at these sizes.


def _im2col_nhwc(xl: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, h, w, c = xl.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(xl, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, oh, ow, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    col = np.ascontiguousarray(windows)
    return col.reshape(n * oh * ow, kh * kw * c), oh, ow


def _col2im_nhwc(dcol: np.ndarray, n: int, h: int, w: int, c: int,
                 kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    dview = dcol.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dview[:, :, :, i, j]
    return dxp[:, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution via im2col + matmul; w is (out_ch, in_ch, kh, kw)."""
    n, c, h, wid = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ContractViolation(f"conv2d channel mismatch: input {c}, kernel {ic}")
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    col, oh, ow = _im2col_nhwc(xl, kh, kw, stride, pad)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * ic, oc)
    out = (col @ wmat + b.data).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        dw = (col.T @ gmat).reshape(kh, kw, ic, oc).transpose(3, 2, 0, 1)
        db = gmat.sum(axis=0)
        dcol = gmat @ wmat.T
        dxl = _col2im_nhwc(dcol, n, h, wid, c, kh, kw, stride, pad, oh, ow)
        return ((x, dxl.transpose(0, 3, 1, 2)), (w, dw), (b, db))
    return _make(out, (x, w, b), "conv2d", backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     pad: int = 0, output_pad: int = 0) -> Tensor:
    """Transposed convolution (adjoint of conv2d); w is (in_ch, out_ch, kh, kw)."""
    n, c, h, wid = x.shape
    ic, oc, kh, kw = w.shape
    if ic != c:
        raise ContractViolation(f"conv_transpose2d channel mismatch: input {c}, kernel {ic}")
    oh = (h - 1) * stride - 2 * pad + kh + output_pad
    ow = (wid - 1) * stride - 2 * pad + kw + output_pad
    wmat = w.data.transpose(0, 2, 3, 1).reshape(ic, kh * kw * oc)
    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * wid, ic)
    dcol = xmat @ wmat
    canvas_h = (h - 1) * stride + kh + output_pad
    canvas_w = (wid - 1) * stride + kw + output_pad
    dview = dcol.reshape(n, h, wid, kh, kw, oc)
    canvas = np.zeros((n, canvas_h, canvas_w, oc))
    for i in range(kh):
        for j in range(kw):
            canvas[:, i:i + stride * (h - 1) + 1:stride,
                   j:j + stride * (wid - 1) + 1:stride] += dview[:, :, :, i, j]
    out = (canvas[:, pad:pad + oh, pad:pad + ow] + b.data).transpose(0, 3, 1, 2)

    def backward(g):
        gcanvas = np.zeros((n, canvas_h, canvas_w, oc))
        gcanvas[:, pad:pad + oh, pad:pad + ow] = g.transpose(0, 2, 3, 1)
        gcol = np.empty((n, h, wid, kh, kw, oc))
        for i in range(kh):
            for j in range(kw):
                gcol[:, :, :, i, j] = gcanvas[:, i:i + stride * (h - 1) + 1:stride,
                                              j:j + stride * (wid - 1) + 1:stride]
        gmat = gcol.reshape(n * h * wid, kh * kw * oc)
        dx = (gmat @ wmat.T).reshape(n, h, wid, ic).transpose(0, 3, 1, 2)
        dw = (xmat.T @ gmat).reshape(ic, kh, kw, oc).transpose(0, 3, 1, 2)
        db = g.sum(axis=(0, 2, 3))
        return ((x, dx), (w, dw), (b, db))
    return _make(out, (x, w, b), "conv_transpose2d", backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel batch normalization over (N, H, W); returns (out, mean, var).

    The returned mean/var are plain arrays (population statistics of this
    batch) so the calling layer can maintain running estimates.
    """
    n, c, h, w = x.shape
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gmean = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gx_mean = (g * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        dx = (gamma.data * inv_std).reshape(1, c, 1, 1) * (g - gmean - xhat * gx_mean)
        return ((x, dx), (gamma, dgamma), (beta, dbeta))
    out_t = _make(out, (x, gamma, beta), "batch_norm2d", backward)
    return out_t, mean, var


def masked_logsumexp_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise logsumexp of `a` over the True entries of `mask`.

    Stable for any magnitude: each row is shifted by its masked maximum, and
    masked-out entries are pushed to a large negative constant so their
    exponentials underflow to exactly zero.  Every row must have at least one
    masked-in entry.
    """
    if a.data.ndim != 2 or mask.shape != a.data.shape:
        raise ContractViolation("masked_logsumexp_rows expects matching 2-d shapes")
    if not mask.any(axis=1).all():
        raise ContractViolation("logsumexp over an empty row")
    shifts = np.max(np.where(mask, a.data, -np.inf), axis=1)
    offset = np.where(mask, -shifts[:, None], -1e30)
    shifted = mul(a, Tensor(mask.astype(np.float64))) + Tensor(offset)
    return log(tsum(exp(shifted), axis=1)) + Tensor(shifts)


def forward_backward(root: Tensor):
    """Run backward from a scalar root; return {leaf tensor: gradient array}.

    Leaves are tensors with requires_grad set that were not produced by an op.
    Gradients accumulate into ``.grad`` as well, exactly as ``backward`` does.
    """
    root.backward()
    grads = {}
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and not node._parents and node.grad is not None:
            grads[node] = node.grad
        stack.extend(node._parents)
    return grads
