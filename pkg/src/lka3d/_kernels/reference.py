"""Scalar-loop reference convolutions.

These are the ground-truth implementations the fast backends are checked
against.  They accumulate one output element at a time in a fixed order
(channel-within-group, then kernel z/y/x; batch then output position for
weight gradients) so that the compiled backend, which uses the same order,
matches them bit for bit in float64.  They are far too slow for real work
and exist only for validation.
"""

from __future__ import annotations

import numpy as np


def conv_forward(x, w, bias, stride, dilation, padding, groups):
    """Direct convolution, NCDHW input, (Co, Ci/groups, kd, kh, kw) weight."""
    n, ci, d, h, wd = x.shape
    co, cig, kd, kh, kw = w.shape
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    od = (d + 2 * pd - dd * (kd - 1) - 1) // sd + 1
    oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    copg = co // groups
    y = np.zeros((n, co, od, oh, ow), dtype=x.dtype)
    for b in range(n):
        for c in range(co):
            ci0 = (c // copg) * cig
            for z in range(od):
                iz0 = z * sd - pd
                for yy in range(oh):
                    iy0 = yy * sh - ph
                    for xx in range(ow):
                        ix0 = xx * sw - pw
                        acc = x.dtype.type(0)
                        for cg in range(cig):
                            for a in range(kd):
                                iz = iz0 + a * dd
                                if iz < 0 or iz >= d:
                                    continue
                                for bb in range(kh):
                                    iy = iy0 + bb * dh
                                    if iy < 0 or iy >= h:
                                        continue
                                    for cc in range(kw):
                                        ix = ix0 + cc * dw
                                        if ix < 0 or ix >= wd:
                                            continue
                                        acc += x[b, ci0 + cg, iz, iy, ix] * w[c, cg, a, bb, cc]
                        y[b, c, z, yy, xx] = acc
    if bias is not None:
        y = y + bias.reshape(1, co, 1, 1, 1)
    return y


def conv_backward_input(gy, w, in_shape, stride, dilation, padding, groups):
    """Gradient w.r.t. the convolution input (gather formulation)."""
    n, co, od, oh, ow = gy.shape
    _, cig, kd, kh, kw = w.shape
    d, h, wd = in_shape
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    ci = cig * groups
    copg = co // groups
    gx = np.zeros((n, ci, d, h, wd), dtype=gy.dtype)
    for b in range(n):
        for c in range(ci):
            g = c // cig
            cg = c % cig
            for iz in range(d):
                for iy in range(h):
                    for ix in range(wd):
                        acc = gy.dtype.type(0)
                        for cp in range(copg):
                            oc = g * copg + cp
                            for a in range(kd):
                                tz = iz + pd - a * dd
                                if tz % sd != 0:
                                    continue
                                z = tz // sd
                                if z < 0 or z >= od:
                                    continue
                                for bb in range(kh):
                                    ty = iy + ph - bb * dh
                                    if ty % sh != 0:
                                        continue
                                    yy = ty // sh
                                    if yy < 0 or yy >= oh:
                                        continue
                                    for cc in range(kw):
                                        tx = ix + pw - cc * dw
                                        if tx % sw != 0:
                                            continue
                                        xx = tx // sw
                                        if xx < 0 or xx >= ow:
                                            continue
                                        acc += w[oc, cg, a, bb, cc] * gy[b, oc, z, yy, xx]
                        gx[b, c, iz, iy, ix] = acc
    return gx


def conv_backward_weight(x, gy, w_shape, stride, dilation, padding, groups):
    """Gradient w.r.t. the convolution weight."""
    n, ci, d, h, wd = x.shape
    _, co, od, oh, ow = gy.shape
    _, cig, kd, kh, kw = w_shape
    sd, sh, sw = stride
    dd, dh, dw = dilation
    pd, ph, pw = padding
    copg = co // groups
    gw = np.zeros(w_shape, dtype=x.dtype)
    for c in range(co):
        ci0 = (c // copg) * cig
        for cg in range(cig):
            for a in range(kd):
                for bb in range(kh):
                    for cc in range(kw):
                        acc = x.dtype.type(0)
                        for b in range(n):
                            for z in range(od):
                                iz = z * sd - pd + a * dd
                                if iz < 0 or iz >= d:
                                    continue
                                for yy in range(oh):
                                    iy = yy * sh - ph + bb * dh
                                    if iy < 0 or iy >= h:
                                        continue
                                    for xx in range(ow):
                                        ix = xx * sw - pw + cc * dw
                                        if ix < 0 or ix >= wd:
                                            continue
                                        acc += gy[b, c, z, yy, xx] * x[b, ci0 + cg, iz, iy, ix]
                        gw[c, cg, a, bb, cc] = acc
    return gw
