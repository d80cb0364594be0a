"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray together with an optional gradient and the
closure that propagates incoming gradients to its parents.  Graphs are
built eagerly by the operations below and torn down by ``backward`` (one
shot; a second call on the same graph raises).  float32 is the working
precision; float64 is used by the finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or a length-3 sequence, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution.

    ``kernel``, ``stride``, ``dilation``, ``padding`` and ``output_padding``
    accept an int or a (depth, height, width) triple.  ``transpose`` selects
    transposed convolution, in which case the weight layout is
    (Cin, Cout/groups, kd, kh, kw) instead of (Cout, Cin/groups, ...).
    """

    kernel: tuple
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    transpose: bool = False
    output_padding: tuple = (0, 0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation", "padding", "output_padding"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride) \
                or any(d < 1 for d in self.dilation):
            raise ValueError(f"kernel, stride and dilation must be positive: {self}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be non-negative: {self}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive: {self}")
        if self.transpose:
            if any(op < 0 or op >= s for op, s in zip(self.output_padding, self.stride)):
                raise ValueError(f"output_padding must satisfy 0 <= op < stride: {self}")
        elif self.output_padding != (0, 0, 0):
            raise ValueError("output_padding is only valid for transposed convolutions")

    def out_shape(self, in_spatial):
        """Output (D, H, W) for the given input spatial shape."""
        if self.transpose:
            out = _kernels.transpose_out_shape(
                in_spatial, self.kernel, self.stride, self.dilation,
                self.padding, self.output_padding)
        else:
            out = _kernels.out_shape(
                in_spatial, self.kernel, self.stride, self.dilation, self.padding)
        if any(o < 1 for o in out):
            raise ValueError(f"non-positive output size {out} for input {tuple(in_spatial)} with {self}")
        return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # ------------------------------------------------------------------
    # introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # graph

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or not g.flags.owndata else g
        else:
            self.grad = self.grad + g

    def backward(self):
        """Backpropagate from a scalar; frees the graph as it goes."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward was already called on this graph")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._backward_fn is not None:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                node._backward_fn = None
                node._consumed = True
            if node._parents and node is not self:
                node.grad = None  # intermediate grads are not retained
            node._parents = ()

    # ------------------------------------------------------------------
    # operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _as_tensor(v, dtype):
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=dtype), requires_grad=False)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum a gradient over dimensions that were broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_dtypes(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"mixed tensor dtypes: {a.dtype} vs {b.dtype}")


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_dtypes(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def power(a, exponent):
    """Elementwise power with a constant scalar exponent."""
    if isinstance(exponent, Tensor):
        raise TypeError("power expects a constant scalar exponent")
    e = float(exponent)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (e * a.data ** (e - 1.0)))

    return _make(a.data ** np.asarray(e, dtype=a.dtype), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def gelu(a):
    """Exact Gaussian error linear unit, 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * np.asarray(1.0 / math.sqrt(2.0), dtype=x.dtype)))

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * np.asarray(1.0 / math.sqrt(2.0 * math.pi), dtype=x.dtype)
            a._accumulate(g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward)


# ----------------------------------------------------------------------
# shape and reduction


def tensor_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g.reshape(()) if g.ndim else g, a.shape).astype(a.dtype, copy=True))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _make(out_data, (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def getitem(a, idx):
    """Basic (slice/int) indexing; gradients scatter back into place."""

    def backward(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            gx[idx] = g
            a._accumulate(gx)

    return _make(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ----------------------------------------------------------------------
# neural-network primitives


def conv3d(x, weight, bias=None, spec=None):
    """3D (transposed) convolution over an (N, C, D, H, W) tensor."""
    if spec is None:
        raise ValueError("conv3d requires a ConvSpec")
    if x.data.ndim != 5:
        raise ValueError(f"conv3d expects a 5D input, got shape {x.shape}")
    if weight.data.ndim != 5:
        raise ValueError(f"conv3d expects a 5D weight, got shape {weight.shape}")
    if tuple(weight.shape[2:]) != spec.kernel:
        raise ValueError(f"weight kernel {tuple(weight.shape[2:])} does not match spec {spec.kernel}")
    ci = x.shape[1]
    if spec.transpose:
        if weight.shape[0] != ci:
            raise ValueError(
                f"transposed conv weight expects {ci} input channels, got {weight.shape[0]}")
        co = weight.shape[1] * spec.groups
        if ci % spec.groups:
            raise ValueError(f"groups={spec.groups} does not divide input channels {ci}")
    else:
        co = weight.shape[0]
        if co % spec.groups:
            raise ValueError(f"groups={spec.groups} does not divide output channels {co}")
        if weight.shape[1] * spec.groups != ci:
            raise ValueError(
                f"weight expects {weight.shape[1] * spec.groups} input channels, got {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
    spec.out_shape(x.shape[2:])  # validates positivity

    xd, wd = x.data, weight.data
    bd = bias.data if bias is not None else None
    _check_dtypes(x, weight)
    in_spatial = xd.shape[2:]
    geom = (spec.stride, spec.dilation, spec.padding)

    if spec.transpose:
        out_data = _kernels.conv_transpose_forward(
            xd, wd, bd, *geom, spec.output_padding, spec.groups)
    else:
        out_data = _kernels.conv_forward(xd, wd, bd, *geom, spec.groups)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        if spec.transpose:
            if x.requires_grad:
                x._accumulate(_kernels.conv_forward(g, wd, None, *geom, spec.groups))
            if weight.requires_grad:
                weight._accumulate(
                    _kernels.conv_backward_weight(g, xd, wd.shape, *geom, spec.groups))
        else:
            if x.requires_grad:
                x._accumulate(
                    _kernels.conv_backward_input(g, wd, in_spatial, *geom, spec.groups))
            if weight.requires_grad:
                weight._accumulate(
                    _kernels.conv_backward_weight(xd, g, wd.shape, *geom, spec.groups))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))

    return _make(out_data, parents, backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, D, H, W).

    ``running_mean``/``running_var`` are plain ndarrays updated in place in
    training mode (unbiased variance, exponential moving average) and used
    directly in eval mode.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ValueError(f"batch_norm expects a 5D input, got shape {x.shape}")
    c = xd.shape[1]
    axes = (0, 2, 3, 4)
    gshape = (1, c, 1, 1, 1)
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // c
        if m > 1:
            running_var *= 1.0 - momentum
            running_var += momentum * (var * (m / (m - 1.0)))
        else:
            running_var *= 1.0 - momentum
            running_var += momentum * var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mean.reshape(gshape)) * inv_std.reshape(gshape)
    out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gs = g * gamma.data.reshape(gshape)
        if training:
            m = xd.size // c
            mean_gs = gs.mean(axis=axes).reshape(gshape)
            mean_gs_xhat = (gs * xhat).mean(axis=axes).reshape(gshape)
            gx = inv_std.reshape(gshape) * (gs - mean_gs - xhat * mean_gs_xhat)
        else:
            gx = gs * inv_std.reshape(gshape)
        x._accumulate(gx.astype(xd.dtype, copy=False))

    return _make(out_data, (x, gamma, beta), backward)


def layer_norm_channels(x, gamma, beta, eps=1e-6):
    """Layer normalization over the channel axis, per voxel."""
    xd = x.data
    if xd.ndim != 5:
        raise ValueError(f"layer_norm_channels expects a 5D input, got shape {x.shape}")
    c = xd.shape[1]
    gshape = (1, c, 1, 1, 1)
    mean = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mean) * inv_std
    out_data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3, 4)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if not x.requires_grad:
            return
        gs = g * gamma.data.reshape(gshape)
        mean_gs = gs.mean(axis=1, keepdims=True)
        mean_gs_xhat = (gs * xhat).mean(axis=1, keepdims=True)
        x._accumulate(inv_std * (gs - mean_gs - xhat * mean_gs_xhat))

    return _make(out_data, (x, gamma, beta), backward)


# ----------------------------------------------------------------------
# verification


def gradient_check(fn, tensors, eps=1e-5):
    """Compare analytic gradients of ``fn(*tensors)`` to central differences.

    ``fn`` must return a scalar Tensor.  Inputs are promoted to float64.
    Returns the maximum over all inputs of
    max |analytic - numeric| / max(max |numeric|, 1e-8).
    """
    tensors = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in tensors]
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = float(fn(*tensors).data)
            flat[i] = orig - eps
            with no_grad():
                lo = float(fn(*tensors).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        scale = max(np.abs(numeric).max(), 1e-8)
        err = np.abs(t.grad - numeric).max() / scale
        worst = max(worst, float(err))
    return worst
