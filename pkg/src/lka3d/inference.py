"""Gaussian-weighted sliding-window inference and flip test-time augmentation.

Windows are blended with a separable Gaussian importance map so that
window-centre predictions dominate over border ones; accumulation runs in
float64 and only the final blend is cast back to float32.  Volumes smaller
than the window are zero-padded up to it and the padding is removed from
the output.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pipeline import Volume

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window geometry: window size, fractional overlap between
    consecutive windows, and Gaussian width as a fraction of window size."""

    size: tuple = (128, 128, 128)
    overlap: float = 0.5
    sigma_scale: float = 0.125

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if len(self.size) != 3 or any(s < 1 for s in self.size):
            raise ValueError(f"window size must be three positive ints, got {self.size}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.sigma_scale <= 0:
            raise ValueError(f"sigma_scale must be > 0, got {self.sigma_scale}")


def gaussian_weight_map(spec: WindowSpec) -> np.ndarray:
    """Separable Gaussian over the window, peak 1 at the centre, clipped
    below at WEIGHT_FLOOR so border voxels keep a nonzero vote."""
    axes = []
    for s in spec.size:
        sigma = spec.sigma_scale * s
        pos = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
        ax = np.exp(-0.5 * (pos / sigma) ** 2)
        axes.append(ax / ax.max())
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, WEIGHT_FLOOR)


def window_origins(extent: int, window: int, overlap: float):
    """Origins along one axis: stride floor(window*(1-overlap)), final
    origin clamped so the last window ends exactly at the volume edge."""
    if extent < window:
        raise ValueError("extent smaller than window")
    step = max(1, int(np.floor(window * (1.0 - overlap))))
    origins = list(range(0, extent - window + 1, step))
    if origins[-1] != extent - window:
        origins.append(extent - window)
    return origins


def sliding_window(model, volume: Volume, spec: WindowSpec) -> Volume:
    """Predict logits for the whole volume, one window at a time.

    Returns a Volume of float32 logits with one channel per class and the
    input's spatial shape and spacing.
    """
    data = volume.data
    shape = data.shape[1:]
    if data.size == 0:
        raise ValueError("empty volume")
    pads = [max(0, w - s) for s, w in zip(shape, spec.size)]
    if any(pads):
        pad_width = [(0, 0)] + [(p // 2, p - p // 2) for p in pads]
        data = np.pad(data, pad_width)
    padded_shape = data.shape[1:]

    origins = [window_origins(e, w, spec.overlap)
               for e, w in zip(padded_shape, spec.size)]
    weight = gaussian_weight_map(spec)

    was_training = model.training
    model.eval()
    try:
        num = None
        den = np.zeros(padded_shape, dtype=np.float64)
        with T.no_grad():
            for oz, oy, ox in itertools.product(*origins):
                sl = (slice(oz, oz + spec.size[0]),
                      slice(oy, oy + spec.size[1]),
                      slice(ox, ox + spec.size[2]))
                win = data[(slice(None),) + sl].astype(np.float32, copy=False)
                logits = model(T.Tensor(win[None])).data[0]
                if num is None:
                    num = np.zeros((logits.shape[0],) + padded_shape, dtype=np.float64)
                num[(slice(None),) + sl] += logits.astype(np.float64) * weight
                den[sl] += weight
    finally:
        if was_training:
            model.train()

    out = (num / den).astype(np.float32)
    if any(pads):
        sl = tuple(slice(p // 2, p // 2 + s) for p, s in zip(pads, shape))
        out = out[(slice(None),) + sl]
    return Volume(out, spacing_mm=volume.spacing_mm)


ALL_FLIPS = tuple(
    flips for r in range(4) for flips in itertools.combinations((0, 1, 2), r)
)


def tta_flips(model, volume: Volume, spec: WindowSpec, flip_set=ALL_FLIPS) -> Volume:
    """Average sliding-window logits over mirrored copies of the volume.

    Each element of ``flip_set`` is a tuple of spatial axes (0=z, 1=y, 2=x)
    to flip; the prediction is flipped back before averaging.  The default
    set is all 8 axis combinations.
    """
    flip_set = [tuple(sorted(set(f))) for f in flip_set]
    if not flip_set:
        raise ValueError("flip_set is empty")
    if any(a not in (0, 1, 2) for f in flip_set for a in f):
        raise ValueError("flip axes must be in {0, 1, 2}")
    acc = None
    for flips in flip_set:
        axes = tuple(a + 1 for a in flips)  # offset past the channel axis
        flipped = Volume(np.flip(volume.data, axes) if axes else volume.data,
                         spacing_mm=volume.spacing_mm)
        logits = sliding_window(model, flipped, spec).data
        if axes:
            logits = np.flip(logits, axes)
        acc = logits.astype(np.float64) if acc is None else acc + logits
    return Volume((acc / len(flip_set)).astype(np.float32), spacing_mm=volume.spacing_mm)


def logits_to_labels(logits: Volume) -> Volume:
    """Argmax over the channel axis; ties resolve to the lower class index."""
    labels = np.argmax(logits.data, axis=0).astype(np.uint8)
    return Volume(labels[None], spacing_mm=logits.spacing_mm)
