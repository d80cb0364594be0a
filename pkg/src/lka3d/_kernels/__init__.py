"""Convolution backend selection.

Two interchangeable backends implement the same three primitives (forward,
input gradient, weight gradient):

* ``direct``: the compiled Cython extension.  Scalar loops with a fixed
  accumulation order, bit-identical to ``reference.py`` in float64.
* ``numpy``: pure numpy, tap-by-tap BLAS contractions.  Agrees with the
  direct backend to rounding.

The default ``auto`` policy routes each call to whichever backend is faster
for its shape class: depthwise convolutions go to the compiled kernels
(BLAS cannot help there), everything else goes through the BLAS-backed
numpy paths.  Set ``LKA3D_CONV_IMPL`` to ``direct`` or ``numpy`` to force
one backend for every call, or ``auto`` (default) for the mixed policy.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback
from .fallback import out_shape

try:
    from . import _convext

    HAVE_EXT = True
except ImportError:  # pragma: no cover - depends on build environment
    _convext = None
    HAVE_EXT = False

_VALID = ("auto", "direct", "numpy")
_MODE = os.environ.get("LKA3D_CONV_IMPL", "auto")
if _MODE not in _VALID:
    raise ValueError(f"LKA3D_CONV_IMPL must be one of {_VALID}, got {_MODE!r}")
if _MODE == "direct" and not HAVE_EXT:
    raise ImportError("LKA3D_CONV_IMPL=direct but the compiled extension is not available")
if _MODE == "auto" and not HAVE_EXT:
    _MODE = "numpy"


def backend_mode():
    return _MODE


def set_backend_mode(mode):
    """Override the dispatch policy (mainly for tests and benchmarks)."""
    global _MODE
    if mode not in _VALID:
        raise ValueError(f"mode must be one of {_VALID}, got {mode!r}")
    if mode == "direct" and not HAVE_EXT:
        raise ImportError("compiled extension is not available")
    _MODE = mode


def _check_dtype(*arrays):
    dt = arrays[0].dtype
    if dt not in (np.float32, np.float64):
        raise TypeError(f"convolutions support float32/float64, got {dt}")
    for a in arrays[1:]:
        if a is not None and a.dtype != dt:
            raise TypeError(f"mixed dtypes in convolution: {dt} vs {a.dtype}")
    return dt


def _is_depthwise(ci, co, cig, groups):
    return groups == ci == co and cig == 1


def _use_direct(ci, co, cig, groups, kernel, stride, padding, dilation):
    if _MODE == "direct":
        return True
    if _MODE == "numpy":
        return False
    if fallback._is_pointwise(kernel, stride, dilation, padding, groups):
        return False
    return _is_depthwise(ci, co, cig, groups) and HAVE_EXT


def conv_forward(x, w, bias, stride, dilation, padding, groups):
    _check_dtype(x, w, bias)
    n, ci = x.shape[:2]
    co, cig = w.shape[:2]
    kernel = w.shape[2:]
    if _use_direct(ci, co, cig, groups, kernel, stride, padding, dilation):
        osp = out_shape(x.shape[2:], kernel, stride, dilation, padding)
        y = np.zeros((n, co) + osp, dtype=x.dtype)
        _convext.conv_fwd(
            np.ascontiguousarray(x), np.ascontiguousarray(w), y,
            *stride, *dilation, *padding, groups,
        )
        if bias is not None:
            y += bias.reshape(1, co, 1, 1, 1)
        return y
    return fallback.conv_fwd(x, w, bias, stride, dilation, padding, groups)


def conv_backward_input(gy, w, in_shape, stride, dilation, padding, groups):
    _check_dtype(gy, w)
    co, cig = w.shape[:2]
    ci = cig * groups
    kernel = w.shape[2:]
    if _use_direct(ci, co, cig, groups, kernel, stride, padding, dilation):
        gx = np.zeros((gy.shape[0], ci) + tuple(in_shape), dtype=gy.dtype)
        _convext.conv_bwd_input(
            np.ascontiguousarray(gy), np.ascontiguousarray(w), gx,
            *stride, *dilation, *padding, groups,
        )
        return gx
    return fallback.conv_bwd_input(gy, w, in_shape, stride, dilation, padding, groups)


def conv_backward_weight(x, gy, w_shape, stride, dilation, padding, groups):
    _check_dtype(x, gy)
    ci = x.shape[1]
    co, cig = w_shape[:2]
    kernel = tuple(w_shape[2:])
    if _use_direct(ci, co, cig, groups, kernel, stride, padding, dilation):
        gw = np.zeros(w_shape, dtype=x.dtype)
        _convext.conv_bwd_weight(
            np.ascontiguousarray(x), np.ascontiguousarray(gy), gw,
            *stride, *dilation, *padding, groups,
        )
        return gw
    return fallback.conv_bwd_weight(x, gy, w_shape, stride, dilation, padding, groups)


def transpose_out_shape(in_sp, kernel, stride, dilation, padding, output_padding):
    return tuple(
        (i - 1) * s - 2 * p + dil * (k - 1) + 1 + op
        for i, k, s, dil, p, op in zip(in_sp, kernel, stride, dilation, padding, output_padding)
    )


def conv_transpose_forward(x, w, bias, stride, dilation, padding, output_padding, groups):
    """Transposed convolution; weight layout (Cin, Cout/groups, kd, kh, kw).

    Computed as the input gradient of the adjoint forward convolution, so it
    shares dispatch and backends with the plain primitives.
    """
    _check_dtype(x, w, bias)
    osp = transpose_out_shape(x.shape[2:], w.shape[2:], stride, dilation, padding, output_padding)
    y = conv_backward_input(x, w, osp, stride, dilation, padding, groups)
    if bias is not None:
        co = w.shape[1] * groups
        y += bias.reshape(1, co, 1, 1, 1)
    return y
