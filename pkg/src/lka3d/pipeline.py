"""Volume I/O, preprocessing, synthetic cases, and Gaussian blurring.

Volumes are channel-major (C, D, H, W) with voxel spacing in mm.  The native
on-disk format is RVF (raw volume format): magic ``RVF1``, little-endian
u32 channel count, u32 D/H/W, three f32 spacings, a u8 dtype code (0 = f32,
1 = u8), then raw voxels in C,D,H,W order.  NIfTI-1 single-file volumes can
be imported for real data.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

RVF_MAGIC = b"RVF1"
_RVF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_RVF_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass
class Volume:
    """A channel-stacked 3D image with voxel spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (C, D, H, W) or (D, H, W), got {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def voxel_volume_mm3(self):
        return self.spacing_mm[0] * self.spacing_mm[1] * self.spacing_mm[2]


def write_rvf(volume: Volume, path):
    data = volume.data
    if data.dtype not in _RVF_CODES:
        raise TypeError(f"RVF stores float32 or uint8, got {data.dtype}")
    code = _RVF_CODES[data.dtype]
    d, h, w = volume.shape
    with open(path, "wb") as f:
        f.write(RVF_MAGIC)
        f.write(struct.pack("<IIII", volume.channels, d, h, w))
        f.write(struct.pack("<fff", *volume.spacing_mm))
        f.write(struct.pack("<B", code))
        arr = data.astype("<f4") if code == 0 else data
        f.write(np.ascontiguousarray(arr).tobytes())


def read_rvf(path) -> Volume:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RVF_MAGIC:
            raise ValueError(f"{path}: not an RVF volume (magic {magic!r})")
        c, d, h, w = struct.unpack("<IIII", f.read(16))
        spacing = struct.unpack("<fff", f.read(12))
        (code,) = struct.unpack("<B", f.read(1))
        if code not in _RVF_DTYPES:
            raise ValueError(f"{path}: unknown RVF dtype code {code}")
        dtype = _RVF_DTYPES[code]
        count = c * d * h * w
        raw = f.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise ValueError(f"{path}: truncated RVF payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(c, d, h, w)
    return Volume(data.astype(dtype.newbyteorder("=")), spacing)


# NIfTI-1 datatype codes honored on import
_NIFTI_DTYPES = {2: "u1", 4: "<i2", 8: "<i4", 16: "<f4", 64: "<f8", 256: "i1", 512: "<u2", 768: "<u4"}


def read_nifti(path) -> Volume:
    """Import a single-file NIfTI-1 volume (.nii or .nii.gz), no extensions.

    Axes are reordered so the slowest NIfTI axis becomes depth: data (x,y,z)
    maps to (D,H,W) = (z,y,x), and spacing follows the same order.
    """
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < 352:
        raise ValueError(f"{path}: too short for a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    byte_order = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack_from(">i", blob, 0)[0]
        if sizeof_hdr != 348:
            raise ValueError(f"{path}: bad sizeof_hdr, not NIfTI-1")
        byte_order = ">"
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(byte_order + "8h", blob, 40)
    datatype = struct.unpack_from(byte_order + "h", blob, 70)[0]
    pixdim = struct.unpack_from(byte_order + "8f", blob, 76)
    vox_offset = int(struct.unpack_from(byte_order + "f", blob, 108)[0])
    scl_slope = struct.unpack_from(byte_order + "f", blob, 112)[0]
    scl_inter = struct.unpack_from(byte_order + "f", blob, 116)[0]
    ndim = dim[0]
    if ndim not in (3, 4):
        raise ValueError(f"{path}: only 3D/4D NIfTI supported, got dim[0]={ndim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    nt = dim[4] if ndim == 4 else 1
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype])
    if byte_order == ">":
        dtype = dtype.newbyteorder(">")
    count = nx * ny * nz * nt
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape((nx, ny, nz, nt), order="F")
    data = np.ascontiguousarray(np.transpose(data, (3, 2, 1, 0)))  # (C, z, y, x)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    elif data.dtype != np.uint8:
        data = data.astype(np.float32)
    spacing = (abs(pixdim[3]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[1]) or 1.0)
    return Volume(data, spacing)


# ----------------------------------------------------------------------
# preprocessing


def crop_foreground(volume: Volume):
    """Tight crop to voxels > 0 in any channel; returns (cropped, box)."""
    fg = (volume.data > 0).any(axis=0)
    if not fg.any():
        raise ValueError("crop_foreground: volume has no positive voxels")
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        line = fg.any(axis=other)
        idx = np.nonzero(line)[0]
        box.append((int(idx[0]), int(idx[-1]) + 1))
    (z0, z1), (y0, y1), (x0, x1) = box
    cropped = Volume(volume.data[:, z0:z1, y0:y1, x0:x1].copy(), volume.spacing_mm)
    return cropped, tuple(box)


def uncrop(volume: Volume, box, full_shape) -> Volume:
    """Inverse of crop_foreground: zero-pad back to ``full_shape``."""
    out = np.zeros((volume.channels,) + tuple(full_shape), dtype=volume.data.dtype)
    (z0, z1), (y0, y1), (x0, x1) = box
    out[:, z0:z1, y0:y1, x0:x1] = volume.data
    return Volume(out, volume.spacing_mm)


def append_foreground_mask(volume: Volume) -> Volume:
    """Append a channel that is 1 where any input channel is > 0."""
    mask = (volume.data > 0).any(axis=0)
    dtype = volume.data.dtype if np.issubdtype(volume.data.dtype, np.floating) else np.float32
    data = np.concatenate([volume.data.astype(dtype, copy=False),
                           mask[None].astype(dtype)], axis=0)
    return Volume(data, volume.spacing_mm)


def normalize_intensity(volume: Volume, return_flags=False):
    """Per-channel z-score over foreground (> 0) voxels; background set to 0.

    Channels with empty or constant foreground are zeroed and flagged.
    """
    data = volume.data.astype(np.float32, copy=True)
    flags = []
    for c in range(data.shape[0]):
        fg = data[c] > 0
        if not fg.any():
            data[c] = 0.0
            flags.append(c)
            continue
        vals = data[c][fg]
        std = vals.std()
        if std < 1e-8:
            data[c] = 0.0
            flags.append(c)
            continue
        chan = np.zeros_like(data[c])
        chan[fg] = (vals - vals.mean()) / std
        data[c] = chan
    out = Volume(data, volume.spacing_mm)
    if return_flags:
        return out, flags
    return out


def preprocess_case(volume: Volume) -> Volume:
    """Normalize intensities and append the raw-intensity foreground mask.

    The mask is computed from the raw volume before normalization: the
    z-score recenters foreground around 0, which would corrupt the > 0
    predicate if the mask were taken afterwards.
    """
    mask = (volume.data > 0).any(axis=0)
    normed = normalize_intensity(volume)
    data = np.concatenate([normed.data, mask[None].astype(normed.data.dtype)], axis=0)
    return Volume(data, volume.spacing_mm)


def random_crop(volume: Volume, labels: Volume, size, seed, flips=False):
    """Identical random spatial crop of image and labels, zero-padded if needed.

    Draw order under the seed is fixed: three offsets, then (if enabled)
    three flip coins.
    """
    size = tuple(int(s) for s in (size if not isinstance(size, int) else (size,) * 3))
    if volume.shape != labels.shape:
        raise ValueError(f"image/label shapes differ: {volume.shape} vs {labels.shape}")
    rng = np.random.default_rng(seed)
    img, lbl = volume.data, labels.data
    pad = [(0, max(0, s - d)) for s, d in zip(size, volume.shape)]
    if any(p[1] for p in pad):
        img = np.pad(img, [(0, 0)] + pad)
        lbl = np.pad(lbl, [(0, 0)] + pad)
    spatial = img.shape[1:]
    offs = [int(rng.integers(0, d - s + 1)) for d, s in zip(spatial, size)]
    sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(offs, size))
    img, lbl = img[sl], lbl[sl]
    if flips:
        for axis in range(3):
            if rng.random() < 0.5:
                img = np.flip(img, axis=axis + 1)
                lbl = np.flip(lbl, axis=axis + 1)
    return (Volume(img.copy(), volume.spacing_mm), Volume(lbl.copy(), labels.spacing_mm))


def gaussian_blur(volume: Volume, sigma_vox) -> Volume:
    """Separable Gaussian blur, truncated at 4σ per side, kernel sum 1.

    σ = 0 is the identity.  Borders use zero padding, so total intensity is
    preserved only for interior-supported inputs.
    """
    if sigma_vox < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return Volume(volume.data.copy(), volume.spacing_mm)
    radius = int(np.ceil(4.0 * sigma_vox))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    kernel = (kernel / kernel.sum()).astype(np.float32)
    data = volume.data.astype(np.float32, copy=True)
    for axis in (1, 2, 3):
        data = ndimage.convolve1d(data, kernel, axis=axis, mode="constant", cval=0.0)
    return Volume(data, volume.spacing_mm)


def one_hot_labels(labels, num_classes):
    """(N, D, H, W) integer labels → (N, K, D, H, W) float32 one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float32)
    for k in range(num_classes):
        out[:, k] = labels == k
    return out


# ----------------------------------------------------------------------
# synthetic cases


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for clinical volumes: a textured ellipsoidal head
    containing bright spherical lesions."""

    shape: tuple = (32, 32, 32)
    lesion_count_range: tuple = (1, 3)
    radius_range_vox: tuple = (3.0, 6.0)
    intensity_contrast: float = 2.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "lesion_count_range", tuple(int(c) for c in self.lesion_count_range))
        object.__setattr__(self, "radius_range_vox", tuple(float(r) for r in self.radius_range_vox))
        if len(self.shape) != 3 or any(s < 8 for s in self.shape):
            raise ValueError(f"shape must be 3 dims of at least 8 voxels, got {self.shape}")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.radius_range_vox
        if rlo < 1 or rhi < rlo:
            raise ValueError(f"radii must be >= 1 and non-empty, got {self.radius_range_vox}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipsoid_mask(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def synth_case(spec: SyntheticSpec):
    """Generate one (image, label) pair, deterministic under the seed."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    center = tuple((s - 1) / 2.0 for s in shape)
    head_radii = tuple(0.45 * s for s in shape)
    head = _ellipsoid_mask(shape, center, head_radii)

    noise = rng.standard_normal(shape).astype(np.float32)
    texture = gaussian_blur(Volume(noise[None]), 2.0).data[0]
    tex_std = texture[head].std()
    if tex_std > 0:
        texture = texture / tex_std
    img = np.zeros(shape, dtype=np.float32)
    img[head] = 1.0 + 0.3 * texture[head]

    count = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    label = np.zeros(shape, dtype=np.uint8)
    for _ in range(count):
        radius = float(rng.uniform(*spec.radius_range_vox))
        if any(radius + 1 >= s - radius - 2 for s in shape):
            continue  # lesion cannot fit this volume
        placed = False
        for _attempt in range(100):
            cand = tuple(
                float(rng.uniform(radius + 1, s - radius - 2)) for s in shape
            )
            margin = tuple(max(hr - radius - 1.0, 1e-3) for hr in head_radii)
            fit = sum(((cd - cc) / m) ** 2 for cd, cc, m in zip(cand, center, margin))
            if fit <= 1.0:
                placed = True
                break
        if not placed:
            continue
        lesion = _ellipsoid_mask(shape, cand, (radius,) * 3)
        img[lesion] += spec.intensity_contrast
        label[lesion] = 1
    if spec.noise_sigma > 0:
        img[head] += spec.noise_sigma * rng.standard_normal(int(head.sum())).astype(np.float32)
    np.maximum(img, 0.01, where=head, out=img)
    img[~head] = 0.0
    return Volume(img[None]), Volume(label[None])
