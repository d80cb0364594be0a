"""Effective-receptive-field maps and the texture-bias blur probe.

The ERF of an encoder stage is measured by seeding the backward pass with 1
at the central voxel of the stage's pre-norm feature map (summed over
channels), backpropagating to the input, and averaging the absolute input
gradient over channels and subjects; maps are normalized to peak 1.  The
blur probe measures a trained model's self-consistency: predictions on
Gaussian-blurred inputs are scored against the prediction on the clean
input, not against ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .inference import WindowSpec, logits_to_labels, sliding_window
from .metrics import dice as dice_score
from .metrics import hd95 as hd95_score
from .pipeline import Volume, gaussian_blur


@dataclass(frozen=True)
class ERFMap:
    """Normalized input-gradient magnitude map for one encoder stage."""

    map: np.ndarray  # (D, H, W), values in [0, 1]
    stage: int
    subjects: int


def erf_map(model, stage, inputs) -> ERFMap:
    """Average input-gradient footprint of the stage's central feature voxel.

    ``inputs`` is a list of Volumes (or (C,D,H,W) arrays) of identical shape.
    """
    if not inputs:
        raise ValueError("need at least one input")
    was_training = model.training
    model.eval()
    try:
        acc = None
        for v in inputs:
            data = v.data if isinstance(v, Volume) else np.asarray(v)
            x = T.Tensor(data[None].astype(np.float32), requires_grad=True)
            feat = model.forward_features(x, stage)
            center = tuple(s // 2 for s in feat.shape[2:])
            seed = feat[(0, slice(None)) + center]
            T.tensor_sum(seed).backward()
            g = np.abs(x.grad[0]).sum(axis=0)
            acc = g if acc is None else acc + g
    finally:
        if was_training:
            model.train()
    acc /= len(inputs)
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return ERFMap(map=acc, stage=stage, subjects=len(inputs))


def erf_radius(erf: ERFMap, threshold: float) -> float:
    """Radius (voxels) of the smallest ball centered on the map's geometric
    center that contains every voxel with value >= threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    m = erf.map
    above = m >= threshold
    if not above.any():
        raise ValueError(f"no voxels at or above threshold {threshold} (max {m.max():.3g})")
    center = (np.asarray(m.shape, dtype=np.float64) - 1) / 2.0
    coords = np.argwhere(above).astype(np.float64)
    return float(np.sqrt(((coords - center) ** 2).sum(axis=1)).max())


def erf_radius_by_stage(model, inputs, threshold, stages=None):
    """erf_radius for several stages at once; returns {stage: radius}."""
    stages = range(1, len(model.stages) + 1) if stages is None else stages
    return {s: erf_radius(erf_map(model, s, inputs), threshold) for s in stages}


@dataclass
class BlurProbeResult:
    """Self-consistency vs blur strength: rows of (case, sigma, dice, hd95)."""

    sigmas: tuple
    rows: list  # (case_id, sigma, dice, hd95)

    def per_sigma(self, reduce=np.median):
        out = {}
        for s in self.sigmas:
            ds = [r[2] for r in self.rows if r[1] == s]
            hs = [h for r in self.rows if r[1] == s
                  for h in [r[3]] if np.isfinite(h)]
            out[s] = (float(reduce(ds)),
                      float(reduce(hs)) if hs else float("nan"))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case", "sigma", "dice", "hd95"])
            for case_id, sigma, d, h in self.rows:
                writer.writerow([case_id, sigma, f"{d:.6f}", f"{h:.6f}"])


def blur_probe(model, cases, sigmas, spec: WindowSpec) -> BlurProbeResult:
    """Predict each case clean, then at every blur level, and score the
    blurred-input predictions against the clean one.

    ``cases`` is a list of (case_id, Volume) model-ready inputs; every
    channel is blurred.  σ=0 reuses the clean prediction, so its row is an
    exact identity (dice 1, hd95 0 conventions included).
    """
    sigmas = tuple(float(s) for s in sigmas)
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be >= 0")
    rows = []
    for case_id, volume in cases:
        reference = logits_to_labels(sliding_window(model, volume, spec))
        ref_mask = reference.data[0] > 0
        for sigma in sigmas:
            if sigma == 0.0:
                pred_mask = ref_mask
            else:
                blurred = gaussian_blur(volume, sigma)
                pred = logits_to_labels(sliding_window(model, blurred, spec))
                pred_mask = pred.data[0] > 0
            d = dice_score(pred_mask, ref_mask)
            h = hd95_score(pred_mask, ref_mask, volume.spacing_mm)
            if not pred_mask.any() and not ref_mask.any():
                h = 0.0  # identical (empty) predictions: zero distance
            elif sigma == 0.0:
                h = 0.0
            rows.append((case_id, sigma, d, h))
    return BlurProbeResult(sigmas=sigmas, rows=rows)
