# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct 3D convolution kernels.

Accumulation order per output element is fixed (channel-within-group, then
kernel z, y, x; for weight gradients batch, then output z, y, x) and matches
``reference.py`` exactly, so float64 results are bit-identical to the scalar
reference.  Valid kernel-tap ranges are precomputed per coordinate, which
lets border and interior share one check-free inner loop; skipped taps are
zero-padding contributions and do not participate in the sum in either
implementation.
"""

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t tap_lo(Py_ssize_t i0, Py_ssize_t dil) noexcept nogil:
    # smallest tap a with i0 + a*dil >= 0
    if i0 >= 0:
        return 0
    return (-i0 + dil - 1) // dil


cdef inline Py_ssize_t tap_hi(Py_ssize_t i0, Py_ssize_t dil, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    # largest tap a < k with i0 + a*dil <= n-1; -1 when no tap is in bounds
    cdef Py_ssize_t num = n - 1 - i0
    cdef Py_ssize_t hi
    if num < 0:
        return -1
    hi = num // dil
    if hi > k - 1:
        hi = k - 1
    return hi


def conv_fwd(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w, real[:, :, :, :, ::1] y,
             Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
             Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw,
             Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw,
             Py_ssize_t groups):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t co = w.shape[0], cig = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t od = y.shape[2], oh = y.shape[3], ow = y.shape[4]
    cdef Py_ssize_t copg = co // groups
    cdef Py_ssize_t b, c, z, yy, xx, cg, a, bb, cc, ci0
    cdef Py_ssize_t iz0, iy0, ix0, alo, ahi, blo, bhi, clo, chi
    cdef real acc
    with nogil:
        for b in range(n):
            for c in range(co):
                ci0 = (c // copg) * cig
                for z in range(od):
                    iz0 = z * sd - pd
                    alo = tap_lo(iz0, dd)
                    ahi = tap_hi(iz0, dd, d, kd)
                    for yy in range(oh):
                        iy0 = yy * sh - ph
                        blo = tap_lo(iy0, dh)
                        bhi = tap_hi(iy0, dh, h, kh)
                        for xx in range(ow):
                            ix0 = xx * sw - pw
                            clo = tap_lo(ix0, dw)
                            chi = tap_hi(ix0, dw, wd, kw)
                            acc = 0
                            for cg in range(cig):
                                for a in range(alo, ahi + 1):
                                    for bb in range(blo, bhi + 1):
                                        for cc in range(clo, chi + 1):
                                            acc = acc + x[b, ci0 + cg, iz0 + a * dd, iy0 + bb * dh, ix0 + cc * dw] * w[c, cg, a, bb, cc]
                            y[b, c, z, yy, xx] = acc


def conv_bwd_input(real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] w, real[:, :, :, :, ::1] gx,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                   Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw,
                   Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw,
                   Py_ssize_t groups):
    cdef Py_ssize_t n = gx.shape[0], ci = gx.shape[1], d = gx.shape[2], h = gx.shape[3], wd = gx.shape[4]
    cdef Py_ssize_t co = gy.shape[1], od = gy.shape[2], oh = gy.shape[3], ow = gy.shape[4]
    cdef Py_ssize_t cig = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t copg = co // groups
    cdef Py_ssize_t b, c, g, cg, cp, oc, iz, iy, ix, a, bb, cc, z, yy, xx, tz, ty, tx
    cdef Py_ssize_t alo, ahi, blo, bhi, clo, chi
    cdef real acc
    with nogil:
        for b in range(n):
            for c in range(ci):
                g = c // cig
                cg = c % cig
                if sd == 1 and sh == 1 and sw == 1:
                    # stride-1 gather: tap ranges are contiguous, no checks needed
                    for iz in range(d):
                        # z = iz + pd - a*dd must lie in [0, od)
                        alo = tap_lo(od - 1 - (iz + pd), dd)
                        ahi = tap_hi(od - 1 - (iz + pd), dd, od, kd)
                        # reuse helpers with mirrored coordinate: z decreasing in a
                        for iy in range(h):
                            blo = tap_lo(oh - 1 - (iy + ph), dh)
                            bhi = tap_hi(oh - 1 - (iy + ph), dh, oh, kh)
                            for ix in range(wd):
                                clo = tap_lo(ow - 1 - (ix + pw), dw)
                                chi = tap_hi(ow - 1 - (ix + pw), dw, ow, kw)
                                acc = 0
                                for cp in range(copg):
                                    oc = g * copg + cp
                                    for a in range(alo, ahi + 1):
                                        z = iz + pd - a * dd
                                        for bb in range(blo, bhi + 1):
                                            yy = iy + ph - bb * dh
                                            for cc in range(clo, chi + 1):
                                                acc = acc + w[oc, cg, a, bb, cc] * gy[b, oc, z, yy, ix + pw - cc * dw]
                                gx[b, c, iz, iy, ix] = acc
                else:
                    for iz in range(d):
                        for iy in range(h):
                            for ix in range(wd):
                                acc = 0
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
                                                acc = acc + w[oc, cg, a, bb, cc] * gy[b, oc, z, yy, xx]
                                gx[b, c, iz, iy, ix] = acc


def conv_bwd_weight(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gy, real[:, :, :, :, ::1] gw,
                    Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                    Py_ssize_t dd, Py_ssize_t dh, Py_ssize_t dw,
                    Py_ssize_t pd, Py_ssize_t ph, Py_ssize_t pw,
                    Py_ssize_t groups):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t co = gy.shape[1], od = gy.shape[2], oh = gy.shape[3], ow = gy.shape[4]
    cdef Py_ssize_t cig = gw.shape[1], kd = gw.shape[2], kh = gw.shape[3], kw = gw.shape[4]
    cdef Py_ssize_t copg = co // groups
    cdef Py_ssize_t b, c, cg, a, bb, cc, z, yy, xx, ci0
    cdef Py_ssize_t zlo, zhi, ylo, yhi, xlo, xhi, num
    cdef real acc
    with nogil:
        for c in range(co):
            ci0 = (c // copg) * cig
            for cg in range(cig):
                for a in range(kd):
                    num = pd - a * dd
                    zlo = 0 if num <= 0 else (num + sd - 1) // sd
                    num = d - 1 + pd - a * dd
                    zhi = -1 if num < 0 else num // sd
                    if zhi > od - 1:
                        zhi = od - 1
                    for bb in range(kh):
                        num = ph - bb * dh
                        ylo = 0 if num <= 0 else (num + sh - 1) // sh
                        num = h - 1 + ph - bb * dh
                        yhi = -1 if num < 0 else num // sh
                        if yhi > oh - 1:
                            yhi = oh - 1
                        for cc in range(kw):
                            num = pw - cc * dw
                            xlo = 0 if num <= 0 else (num + sw - 1) // sw
                            num = wd - 1 + pw - cc * dw
                            xhi = -1 if num < 0 else num // sw
                            if xhi > ow - 1:
                                xhi = ow - 1
                            acc = 0
                            for b in range(n):
                                for z in range(zlo, zhi + 1):
                                    for yy in range(ylo, yhi + 1):
                                        for xx in range(xlo, xhi + 1):
                                            acc = acc + gy[b, c, z, yy, xx] * x[b, ci0 + cg, z * sd - pd + a * dd, yy * sh - ph + bb * dh, xx * sw - pw + cc * dw]
                            gw[c, cg, a, bb, cc] = acc
