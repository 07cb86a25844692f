"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray; every op records its inputs and a backward rule on
the produced node, so the op graph doubles as the tape. backward() on a scalar
loss topologically orders that graph and visits each node exactly once in
reverse, accumulating gradients into .grad. Calling backward() again without
zeroing keeps accumulating; that is the documented behaviour, not an error.

Float64 is the default dtype; set_default_dtype(np.float32) switches the whole
stack for cheap training runs.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import DomainError, ShapeError

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    """Independent counter-based stream for (seed, *tags).

    Philox keyed through a SeedSequence whose spawn key is derived from the
    tags, so the same path always yields the same stream and distinct paths
    never collide.
    """
    key = tuple(zlib.crc32(str(t).encode("utf-8")) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_default_dtype) if not isinstance(data, np.ndarray) \
            else data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- basic protocol ----------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph walk ---------------------------------------------------------

    def _topo(self):
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable .grad.

        self must be scalar. Grads add onto whatever is already stored, so
        zero them between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.data.shape}")
        order = self._topo()
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.requires_grad:
                node.grad = None

    # -- operators ----------------------------------------------------------

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=_default_dtype), requires_grad=False, op="const")


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op,
                  parents=parents, backward=backward if req else None)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def back(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), back, "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def back(g):
        a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), back, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to keep exp() off large positives
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def back(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back, "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), back, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        out_data = np.log(a.data)

    def back(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), back, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out_data = np.sqrt(a.data)

    def back(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), back, "sqrt")


def maximum(a, floor: float) -> Tensor:
    """Elementwise max(a, floor) for a scalar floor."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, floor)

    def back(g):
        a._accumulate(g * (a.data > floor))

    return _make(out_data, (a,), back, "maximum")


# -- reductions / shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy()
                          if np.ndim(g) == a.data.ndim else np.full_like(a.data, g))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), back, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def back(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), back, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None or (isinstance(axes, tuple) and len(axes) == 0):
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def back(g):
        a._accumulate(g.transpose(inv))

    return _make(out_data, (a,), back, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        start = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            t._accumulate(g[tuple(idx)])
            start += n

    return _make(out_data, tuple(tensors), back, "concat")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return _make(out_data, (a,), back, "slice")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul needs ndim >= 2 on both operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner mismatch: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), back, "matmul")


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), back, "softmax")


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(g * soft)

    return _make(out_data, (a,), back, "logsumexp")


# -- convolution ----------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    """floor((n + 2*pad - k)/stride) + 1; rejects empty outputs."""
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"conv output collapses: n={n} k={k} stride={stride} pad={pad}")
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B,C,H,W) -> (B, C*k*k, Ho*Wo). Pure layout work, one copy."""
    b, c, h, w = x.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, out_hw, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto (B,C,H,W)."""
    h, w = out_hw
    b = cols.shape[0]
    c = cols.shape[1] // (k * k)
    p = cols.shape[2]
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (h + 2 * pad - k) // stride + 1
    wo = p // ho
    cols = cols.reshape(b, c, k, k, ho, wo)
    x = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    if pad:
        x = x[:, :, pad:pad + h, pad:pad + w]
    return x


def _check_conv_channels(cin, cout, groups, w_shape):
    if cin % groups or cout % groups:
        raise ShapeError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if w_shape[1] != cin // groups:
        raise ShapeError(f"weight expects {w_shape[1]} channels/group, input has {cin // groups}")


def conv2d(x, w, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation. x: (B,Cin,H,W), w: (Cout,Cin/g,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    b, cin, h, wd = x.data.shape
    cout, _, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError("only square kernels supported")
    _check_conv_channels(cin, cout, groups, w.data.shape)
    cin_g, cout_g = cin // groups, cout // groups
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)

    # per-group lowering keeps each group's arithmetic identical to an
    # independent conv on its channel slice
    cols_per_group = []
    out = np.empty((b, cout, ho * wo), dtype=x.data.dtype)
    for gidx in range(groups):
        xg = x.data[:, gidx * cin_g:(gidx + 1) * cin_g]
        cols, _, _ = _im2col(xg, k, stride, padding)
        cols_per_group.append(cols)
        wg = w.data[gidx * cout_g:(gidx + 1) * cout_g].reshape(cout_g, cin_g * k * k)
        out[:, gidx * cout_g:(gidx + 1) * cout_g] = np.matmul(wg, cols)
    out = out.reshape(b, cout, ho, wo)

    def back(g):
        g = g.reshape(b, cout, ho * wo)
        gx = np.empty_like(x.data)
        gw = np.empty_like(w.data)
        for gidx in range(groups):
            gyg = g[:, gidx * cout_g:(gidx + 1) * cout_g]
            cols = cols_per_group[gidx]
            wg = w.data[gidx * cout_g:(gidx + 1) * cout_g].reshape(cout_g, cin_g * k * k)
            gw[gidx * cout_g:(gidx + 1) * cout_g] = np.tensordot(
                gyg, cols, axes=([0, 2], [0, 2])).reshape(cout_g, cin_g, k, k)
            gcols = np.matmul(wg.T, gyg)
            gx[:, gidx * cin_g:(gidx + 1) * cin_g] = _col2im(gcols, (h, wd), k, stride, padding)
        x._accumulate(gx)
        w._accumulate(gw)

    return _make(out, (x, w), back, "conv2d")


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0,
                     output_padding: int = 0, groups: int = 1) -> Tensor:
    """Exact adjoint of conv2d in its first argument, sharing the weight layout.

    x: (B, Cout, Hi, Wi) with Cout = w.shape[0]; returns (B, Cin, Ho, Wo) where
    Ho = (Hi-1)*stride - 2*padding + k + output_padding. For every v and z:
    <conv2d(z, w), v> == <z, conv_transpose2d(v, w)> with matching geometry.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-D input and weight")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"output_padding must lie in [0, stride), got {output_padding}")
    b, cfrom, hi, wi = x.data.shape
    cout, cin_g, k, _ = w.data.shape
    if cfrom != cout:
        raise ShapeError(f"input channels {cfrom} != weight out-channels {cout}")
    if cout % groups:
        raise ShapeError(f"channels {cout} not divisible by groups={groups}")
    cout_g = cout // groups
    cin = cin_g * groups
    ho = (hi - 1) * stride - 2 * padding + k + output_padding
    wo = (wi - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d output collapses")

    out = np.empty((b, cin, ho, wo), dtype=x.data.dtype)
    for gidx in range(groups):
        xg = x.data[:, gidx * cout_g:(gidx + 1) * cout_g].reshape(b, cout_g, hi * wi)
        wg = w.data[gidx * cout_g:(gidx + 1) * cout_g].reshape(cout_g, cin_g * k * k)
        cols = np.matmul(wg.T, xg)
        out[:, gidx * cin_g:(gidx + 1) * cin_g] = _col2im(cols, (ho, wo), k, stride, padding)

    def back(g):
        gx = np.empty_like(x.data)
        gw = np.empty_like(w.data)
        for gidx in range(groups):
            gg = g[:, gidx * cin_g:(gidx + 1) * cin_g]
            cols_g, _, _ = _im2col(gg, k, stride, padding)
            wg = w.data[gidx * cout_g:(gidx + 1) * cout_g].reshape(cout_g, cin_g * k * k)
            gx[:, gidx * cout_g:(gidx + 1) * cout_g] = np.matmul(
                wg, cols_g).reshape(b, cout_g, hi, wi)
            xg = x.data[:, gidx * cout_g:(gidx + 1) * cout_g].reshape(b, cout_g, hi * wi)
            gw[gidx * cout_g:(gidx + 1) * cout_g] = np.tensordot(
                xg, cols_g, axes=([0, 2], [0, 2])).reshape(cout_g, cin_g, k, k)
        x._accumulate(gx)
        w._accumulate(gw)

    return _make(out, (x, w), back, "conv_transpose2d")


# -- diagnostics ------------------------------------------------------------------

def find_first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest op in forward order whose output is non-finite."""
    for node in root._topo():
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None
