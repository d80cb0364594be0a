"""Pure-numpy convolution backend.

General convolutions are computed tap by tap: for each kernel offset the
padded input is sliced with a strided view and contracted against the
corresponding weight slice with a batched matmul, so the heavy lifting goes
through BLAS.  Depthwise convolutions use broadcast multiply-accumulate and
1x1x1 stride-1 convolutions collapse to a single matmul.  Results agree with
the direct backend to rounding (accumulation order differs), which the test
suite checks explicitly.
"""

from __future__ import annotations

import itertools

import numpy as np


def out_shape(in_sp, kernel, stride, dilation, padding):
    sp = []
    for i, k, s, dil, p in zip(in_sp, kernel, stride, dilation, padding):
        o = (i + 2 * p - dil * (k - 1) - 1) // s + 1
        sp.append(o)
    return tuple(sp)


def _is_pointwise(kernel, stride, dilation, padding, groups):
    return (
        kernel == (1, 1, 1)
        and stride == (1, 1, 1)
        and padding == (0, 0, 0)
        and groups == 1
    )


def _taps(kernel):
    return itertools.product(range(kernel[0]), range(kernel[1]), range(kernel[2]))


def _pad(x, padding):
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _tap_slices(tap, dilation, stride, osp):
    return tuple(
        slice(t * dil, t * dil + (o - 1) * s + 1, s)
        for t, dil, s, o in zip(tap, dilation, stride, osp)
    )


def conv_fwd(x, w, bias, stride, dilation, padding, groups):
    n, ci = x.shape[:2]
    co, cig = w.shape[:2]
    kernel = w.shape[2:]
    osp = out_shape(x.shape[2:], kernel, stride, dilation, padding)
    if _is_pointwise(kernel, stride, dilation, padding, groups):
        y = np.matmul(w.reshape(co, ci), x.reshape(n, ci, -1))
        y = y.reshape(n, co, *osp)
    elif groups == ci == co and cig == 1:
        xp = _pad(x, padding)
        y = np.zeros((n, co) + osp, dtype=x.dtype)
        wk = w.reshape(co, *kernel)
        for tap in _taps(kernel):
            sl = xp[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, osp)]
            y += wk[(slice(None),) + tap].reshape(1, co, 1, 1, 1) * sl
    else:
        xp = _pad(x, padding)
        y = np.zeros((n, co) + osp, dtype=x.dtype)
        yf = y.reshape(n, co, -1)
        copg = co // groups
        for g in range(groups):
            wg = w[g * copg:(g + 1) * copg]
            xg = xp[:, g * cig:(g + 1) * cig]
            for tap in _taps(kernel):
                sl = xg[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, osp)]
                yf[:, g * copg:(g + 1) * copg] += np.matmul(
                    wg[(slice(None), slice(None)) + tap], sl.reshape(n, cig, -1)
                )
    if bias is not None:
        y += bias.reshape(1, co, 1, 1, 1)
    return y


def conv_bwd_input(gy, w, in_shape, stride, dilation, padding, groups):
    n = gy.shape[0]
    co, cig = w.shape[:2]
    kernel = w.shape[2:]
    ci = cig * groups
    osp = gy.shape[2:]
    if _is_pointwise(kernel, stride, dilation, padding, groups):
        gx = np.matmul(w.reshape(co, ci).T, gy.reshape(n, co, -1))
        return np.ascontiguousarray(gx.reshape(n, ci, *in_shape))
    pd, ph, pw = padding
    padded = (in_shape[0] + 2 * pd, in_shape[1] + 2 * ph, in_shape[2] + 2 * pw)
    gxp = np.zeros((n, ci) + padded, dtype=gy.dtype)
    if groups == ci == co and cig == 1:
        wk = w.reshape(co, *kernel)
        for tap in _taps(kernel):
            view = gxp[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, osp)]
            view += wk[(slice(None),) + tap].reshape(1, co, 1, 1, 1) * gy
    else:
        copg = co // groups
        for g in range(groups):
            wg = w[g * copg:(g + 1) * copg]
            gyg = gy[:, g * copg:(g + 1) * copg].reshape(n, copg, -1)
            for tap in _taps(kernel):
                contrib = np.matmul(wg[(slice(None), slice(None)) + tap].T, gyg)
                view = gxp[(slice(None), slice(g * cig, (g + 1) * cig)) + _tap_slices(tap, dilation, stride, osp)]
                view += contrib.reshape(view.shape)
    return np.ascontiguousarray(
        gxp[:, :, pd:pd + in_shape[0], ph:ph + in_shape[1], pw:pw + in_shape[2]]
    )


def conv_bwd_weight(x, gy, w_shape, stride, dilation, padding, groups):
    n, ci = x.shape[:2]
    co, cig = w_shape[:2]
    kernel = tuple(w_shape[2:])
    osp = gy.shape[2:]
    if _is_pointwise(kernel, stride, dilation, padding, groups):
        gw = np.matmul(gy.reshape(n, co, -1), x.reshape(n, ci, -1).transpose(0, 2, 1)).sum(axis=0)
        return np.ascontiguousarray(gw.reshape(w_shape))
    xp = _pad(x, padding)
    gw = np.zeros(w_shape, dtype=x.dtype)
    if groups == ci == co and cig == 1:
        for tap in _taps(kernel):
            sl = xp[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, osp)]
            gw[(slice(None), 0) + tap] = np.einsum("ncdhw,ncdhw->c", gy, sl)
    else:
        copg = co // groups
        for g in range(groups):
            gyg = gy[:, g * copg:(g + 1) * copg].reshape(n, copg, -1)
            xg = xp[:, g * cig:(g + 1) * cig]
            for tap in _taps(kernel):
                sl = xg[(slice(None), slice(None)) + _tap_slices(tap, dilation, stride, osp)]
                gw[(slice(g * copg, (g + 1) * copg), slice(None)) + tap] = np.matmul(
                    gyg, sl.reshape(n, cig, -1).transpose(0, 2, 1)
                ).sum(axis=0)
    return gw
