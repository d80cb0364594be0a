"""Independent brute-force oracles used to verify library results.

Everything here is deliberately naive: BFS component labeling, all-pairs
surface distances, dense-kernel convolution via explicit loops over scipy
primitives.  Tests compare the fast library implementations against these.
"""

import gzip
import itertools
import struct

import numpy as np

_CONN_OFFSETS = {
    conn: [o for o in itertools.product((-1, 0, 1), repeat=3)
           if o != (0, 0, 0) and sum(map(abs, o)) <= order]
    for conn, order in ((6, 1), (18, 2), (26, 3))
}


def bf_components(mask, connectivity):
    """Raster-order BFS labeling; returns (labels, count)."""
    offsets = _CONN_OFFSETS[connectivity]
    labels = np.zeros(mask.shape, dtype=np.int32)
    count = 0
    for idx in itertools.product(*(range(s) for s in mask.shape)):
        if mask[idx] and labels[idx] == 0:
            count += 1
            stack = [idx]
            labels[idx] = count
            while stack:
                z, y, x = stack.pop()
                for dz, dy, dx in offsets:
                    nb = (z + dz, y + dy, x + dx)
                    if (all(0 <= nb[i] < mask.shape[i] for i in range(3))
                            and mask[nb] and labels[nb] == 0):
                        labels[nb] = count
                        stack.append(nb)
    return labels, count


def bf_surface(mask):
    """Foreground voxels with a background 6-neighbor (border = background)."""
    out = np.zeros_like(mask, dtype=bool)
    for idx in itertools.product(*(range(s) for s in mask.shape)):
        if not mask[idx]:
            continue
        for dz, dy, dx in _CONN_OFFSETS[6]:
            nb = (idx[0] + dz, idx[1] + dy, idx[2] + dx)
            if (not all(0 <= nb[i] < mask.shape[i] for i in range(3))
                    or not mask[nb]):
                out[idx] = True
                break
    return out


def bf_hd95(pred, gt, spacing):
    """All-pairs symmetric 95th-percentile surface distance; NaN if empty."""
    if not pred.any() or not gt.any():
        return float("nan")
    sp = np.argwhere(bf_surface(pred)) * np.asarray(spacing, dtype=float)
    sg = np.argwhere(bf_surface(gt)) * np.asarray(spacing, dtype=float)
    d_pg = [min(float(np.linalg.norm(a - b)) for b in sg) for a in sp]
    d_gp = [min(float(np.linalg.norm(a - b)) for b in sp) for a in sg]
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def bf_dice(pred, gt):
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def bf_lesion_f1(pred, gt, connectivity):
    gl, ng = bf_components(gt, connectivity)
    pl, npred = bf_components(pred, connectivity)
    if ng == 0 and npred == 0:
        return 1.0
    tp = len({gl[i] for i in map(tuple, np.argwhere(pred & (gl > 0)))})
    fp = npred - len({pl[i] for i in map(tuple, np.argwhere(gt & (pl > 0)))})
    return 2.0 * tp / (2.0 * tp + fp + (ng - tp))


def dense_gaussian_kernel3d(sigma):
    """Full (non-separable) truncated Gaussian kernel, normalized to sum 1."""
    radius = int(np.ceil(4.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * (ax / sigma) ** 2)
    k = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    return k / k.sum()


def conv3d_bruteforce(x, w, stride=(1, 1, 1), dilation=(1, 1, 1),
                      padding=(0, 0, 0), groups=1):
    """Scalar-loop grouped 3D convolution in float64 (independent of the
    package's own scalar reference: different loop structure, numpy sums)."""
    n, ci = x.shape[:2]
    co, cig = w.shape[:2]
    kd, kh, kw = w.shape[2:]
    xp = np.pad(x.astype(np.float64),
                [(0, 0), (0, 0)] + [(p, p) for p in padding])
    osp = []
    for i, (k, s, d) in enumerate(zip((kd, kh, kw), stride, dilation)):
        span = d * (k - 1) + 1
        osp.append((x.shape[2 + i] + 2 * padding[i] - span) // s + 1)
    out = np.zeros((n, co) + tuple(osp))
    cog = co // groups
    for b in range(n):
        for oc in range(co):
            g = oc // cog
            for od in range(osp[0]):
                for oh in range(osp[1]):
                    for ow in range(osp[2]):
                        patch = xp[b, g * cig:(g + 1) * cig,
                                   od * stride[0]:od * stride[0] + dilation[0] * kd:dilation[0],
                                   oh * stride[1]:oh * stride[1] + dilation[1] * kh:dilation[1],
                                   ow * stride[2]:ow * stride[2] + dilation[2] * kw:dilation[2]]
                        out[b, oc, od, oh, ow] = np.sum(patch * w[oc].astype(np.float64))
    return out


def write_nifti1(path, data_xyz, pixdim=(1.0, 1.0, 1.0), dtype_code=16,
                 scl_slope=0.0, scl_inter=0.0, byteorder="<", gzipped=False):
    """Minimal NIfTI-1 writer for testing the reader (F-order voxel data)."""
    codes = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
             64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32}
    arr = np.asarray(data_xyz, dtype=codes[dtype_code])
    ndim = arr.ndim
    dim = [ndim] + list(arr.shape) + [1] * (7 - ndim)
    bitpix = arr.dtype.itemsize * 8
    header = bytearray(348)
    struct.pack_into(f"{byteorder}i", header, 0, 348)
    struct.pack_into(f"{byteorder}8h", header, 40, *dim)
    struct.pack_into(f"{byteorder}h", header, 70, dtype_code)
    struct.pack_into(f"{byteorder}h", header, 72, bitpix)
    pd = [0.0, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0]
    struct.pack_into(f"{byteorder}8f", header, 76, *pd)
    struct.pack_into(f"{byteorder}f", header, 108, 352.0)  # vox_offset
    struct.pack_into(f"{byteorder}f", header, 112, scl_slope)
    struct.pack_into(f"{byteorder}f", header, 116, scl_inter)
    header[344:348] = b"n+1\x00"
    blob = bytes(header) + b"\x00" * 4
    blob += arr.astype(arr.dtype.newbyteorder(byteorder)).tobytes(order="F")
    opener = gzip.open if gzipped else open
    with opener(path, "wb") as f:
        f.write(blob)
