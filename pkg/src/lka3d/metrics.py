"""Segmentation metrics: Dice, HD95, lesion-wise F1, lesion count difference,
absolute volume difference, and connected-component labeling.

Empty-mask conventions (the literature is inconsistent, so they are explicit
here and flagged in reports): dice and lesion_f1 are 1.0 when both masks are
empty; hd95 is NaN when either mask is empty and NaN rows are excluded from
aggregates.  HD95 uses linearly interpolated percentiles of the directed
surface-distance multisets and takes the max of the two directions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .pipeline import Volume

EMPTY_HD95 = float("nan")

_CONNECTIVITY_ORDER = {6: 1, 18: 2, 26: 3}


def _as_mask(m):
    data = m.data if isinstance(m, Volume) else np.asarray(m)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("mask volume must have one channel")
        data = data[0]
    return data.astype(bool)


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def connected_components(mask, connectivity=26):
    """Label connected foreground components.

    Returns (labels, count) where labels is an int32 array with components
    numbered 1..count in order of their lexicographically first voxel, so
    the labeling is deterministic across runs and library versions.
    """
    if connectivity not in _CONNECTIVITY_ORDER:
        raise ValueError(f"connectivity must be one of {sorted(_CONNECTIVITY_ORDER)}")
    m = _as_mask(mask)
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_ORDER[connectivity])
    raw, count = ndimage.label(m, structure=structure)
    if count == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    nonzero = np.flatnonzero(flat)
    # first flat index per label -> rank labels by first appearance
    first = np.full(count + 1, flat.size, dtype=np.int64)
    lab = flat[nonzero]
    np.minimum.at(first, lab, nonzero)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, count + 1, dtype=np.int32)
    return remap[raw], count


def dice(pred, gt):
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    p, g = _as_mask(pred), _as_mask(gt)
    _check_shapes(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def surface_voxels(mask):
    """Foreground voxels with at least one background 6-neighbor; the
    volume border counts as background."""
    m = _as_mask(mask)
    padded = np.pad(m, 1)
    interior = np.ones_like(m)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return m & ~interior


def hd95(pred, gt, spacing_mm=(1.0, 1.0, 1.0)):
    """Symmetric 95th-percentile surface distance in mm.

    Directed distances run from every surface voxel of one mask to the
    nearest surface voxel of the other (exact Euclidean transform, spacing
    aware); the result is the max of the two directed 95th percentiles
    (linear interpolation).  Either mask empty -> NaN.
    """
    p, g = _as_mask(pred), _as_mask(gt)
    _check_shapes(p, g)
    if not p.any() or not g.any():
        return EMPTY_HD95
    sp = surface_voxels(p)
    sg = surface_voxels(g)
    spacing = tuple(float(s) for s in spacing_mm)
    dt_to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dt_to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    d_pg = dt_to_g[sp]
    d_gp = dt_to_p[sg]
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def lesion_f1(pred, gt, connectivity=26):
    """Lesion-wise F1: a ground-truth component counts as detected (TP) if
    any predicted voxel overlaps it; predicted components overlapping no
    ground truth are FP.  Both masks empty -> 1.0."""
    p, g = _as_mask(pred), _as_mask(gt)
    _check_shapes(p, g)
    gt_labels, n_gt = connected_components(g, connectivity)
    pred_labels, n_pred = connected_components(p, connectivity)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    tp = len(np.unique(gt_labels[p & (gt_labels > 0)]))
    fn = n_gt - tp
    fp = n_pred - len(np.unique(pred_labels[g & (pred_labels > 0)]))
    return 2.0 * tp / (2.0 * tp + fp + fn)


def lcd(pred, gt, connectivity=26):
    """Absolute difference in lesion (component) count."""
    _, n_pred = connected_components(pred, connectivity)
    _, n_gt = connected_components(gt, connectivity)
    return abs(n_pred - n_gt)


def avd(pred, gt, spacing_mm=(1.0, 1.0, 1.0)):
    """Absolute volume difference in mm³."""
    p, g = _as_mask(pred), _as_mask(gt)
    _check_shapes(p, g)
    voxel = float(spacing_mm[0]) * float(spacing_mm[1]) * float(spacing_mm[2])
    return abs(int(p.sum()) - int(g.sum())) * voxel


@dataclass
class CaseMetrics:
    case_id: str
    dice_per_class: dict
    hd95_per_class: dict
    lesion_f1: float
    lcd: int
    avd: float
    flags: list = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-case rows plus mean/median aggregates; NaN metric values
    (empty-mask HD95) are excluded from the aggregates."""

    cases: list = field(default_factory=list)

    @property
    def class_ids(self):
        ids = set()
        for c in self.cases:
            ids.update(c.dice_per_class)
        return sorted(ids)

    def _columns(self):
        cols = {}
        for k in self.class_ids:
            cols[f"dice_c{k}"] = [c.dice_per_class.get(k, float("nan")) for c in self.cases]
            cols[f"hd95_c{k}"] = [c.hd95_per_class.get(k, float("nan")) for c in self.cases]
        cols["lesion_f1"] = [c.lesion_f1 for c in self.cases]
        cols["lcd"] = [float(c.lcd) for c in self.cases]
        cols["avd"] = [c.avd for c in self.cases]
        return cols

    def aggregates(self):
        out = {"num_cases": len(self.cases), "mean": {}, "median": {}}
        for name, values in self._columns().items():
            arr = np.asarray(values, dtype=np.float64)
            arr = arr[np.isfinite(arr)]
            out["mean"][name] = float(arr.mean()) if arr.size else None
            out["median"][name] = float(np.median(arr)) if arr.size else None
        return out

    def write_csv(self, path):
        cols = self._columns()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case"] + list(cols) + ["flags"])
            for i, c in enumerate(self.cases):
                writer.writerow([c.case_id]
                                + [f"{cols[name][i]:.6f}" for name in cols]
                                + [";".join(c.flags)])

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.aggregates(), f, indent=2)
            f.write("\n")


def evaluate_case(case_id, pred: Volume, gt: Volume, num_classes=None,
                  connectivity=26) -> CaseMetrics:
    """All metrics for one case of integer label volumes.

    Per-class Dice/HD95 cover classes 1..K-1; lesion metrics treat all
    nonzero labels as lesion foreground.  Spacing comes from the ground
    truth (and must match the prediction's).
    """
    if pred.spacing_mm != gt.spacing_mm:
        raise ValueError(f"spacing mismatch: {pred.spacing_mm} vs {gt.spacing_mm}")
    p = pred.data[0]
    g = gt.data[0]
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if num_classes is None:
        num_classes = int(max(p.max(), g.max())) + 1
    spacing = gt.spacing_mm
    flags = []
    dice_per_class, hd95_per_class = {}, {}
    for k in range(1, max(num_classes, 2)):
        pk, gk = p == k, g == k
        dice_per_class[k] = dice(pk, gk)
        if not pk.any() and not gk.any():
            flags.append(f"dice_c{k}_both_empty")
        h = hd95(pk, gk, spacing)
        hd95_per_class[k] = h
        if not np.isfinite(h):
            flags.append(f"hd95_c{k}_empty")
    pf, gf = p > 0, g > 0
    f1 = lesion_f1(pf, gf, connectivity)
    if not pf.any() and not gf.any():
        flags.append("lesion_f1_both_empty")
    return CaseMetrics(case_id=case_id,
                       dice_per_class=dice_per_class,
                       hd95_per_class=hd95_per_class,
                       lesion_f1=f1,
                       lcd=lcd(pf, gf, connectivity),
                       avd=avd(pf, gf, spacing),
                       flags=flags)
