"""Fast self-verification suites runnable from the CLI.

Four suites exercise the numerical core at reduced sizes: large-kernel
composition, finite-difference gradient checks, sliding-window equivalence,
and metric brute-force parity.  Each suite accepts a ``corrupt`` flag (driven
by the ``LKA3D_SELFTEST_CORRUPT`` environment variable) that injects a
deterministic fault into the quantity under test, proving the suite actually
detects corruption rather than vacuously passing.
"""

from __future__ import annotations

import itertools
import os
import time

import numpy as np

from . import tensor as T
from ._kernels import conv_forward
from .blocks import Conv3d, LKAParams, LKAUnit, Module, compose_depthwise
from .inference import WindowSpec, sliding_window
from .metrics import avd, dice, hd95, lcd
from .pipeline import Volume

CORRUPT_ENV = "LKA3D_SELFTEST_CORRUPT"


class SelfTestFailure(AssertionError):
    pass


def _require(ok, message):
    if not ok:
        raise SelfTestFailure(message)


def suite_kernel_composition(corrupt=False):
    """Sequential DW 5³ then dilated DW 7³ (dilation 3) equals one dense
    depthwise conv with the composed 23³ kernel (valid padding, so the
    identity is exact with no border terms)."""
    rng = np.random.default_rng(11)
    channels = 4
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-12)):
        x = rng.standard_normal((1, channels, 29, 29, 29)).astype(dtype)
        w1 = rng.standard_normal((channels, 1, 5, 5, 5)).astype(dtype)
        w2 = rng.standard_normal((channels, 1, 7, 7, 7)).astype(dtype)
        mid = conv_forward(x, w1, None, (1, 1, 1), (1, 1, 1), (0, 0, 0), channels)
        seq = conv_forward(mid, w2, None, (1, 1, 1), (3, 3, 3), (0, 0, 0), channels)
        composed = compose_depthwise(w1, 1, w2, 3)
        _require(composed.shape[2:] == (23, 23, 23),
                 f"composed support {composed.shape[2:]} != 23 per axis")
        if corrupt:
            composed = composed.copy()
            composed[0, 0, 11, 11, 11] += dtype(1e-2)
        dense = conv_forward(x, composed, None, (1, 1, 1), (1, 1, 1), (0, 0, 0),
                             channels)
        rel = np.abs(seq - dense).max() / max(np.abs(dense).max(), 1e-30)
        _require(rel < tol,
                 f"composition mismatch: rel err {rel:.3e} >= {tol} ({np.dtype(dtype).name})")


def suite_gradient_checks(corrupt=False):
    """Central finite differences vs autograd for key primitives and one
    LKA unit, in float64."""
    rng = np.random.default_rng(23)

    def check(name, fn, tensors, tol):
        err = T.gradient_check(fn, tensors)
        _require(err < tol, f"{name}: rel err {err:.3e} >= {tol}")

    x = T.Tensor(rng.standard_normal((2, 3, 5, 5, 5)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 3, 3, 3, 3)) * 0.3, requires_grad=True)
    calls = {"n": 0}

    def conv_loss(a, b):
        spec = T.ConvSpec(kernel=3, padding=1)
        out = T.tensor_sum(T.mul(T.conv3d(a, b, spec=spec), 0.17))
        calls["n"] += 1
        if corrupt and calls["n"] == 1:
            # test hook: op whose backward pass disagrees with its forward
            out = T.mul(out, 1.0 + 1e-3)
        return out

    check("conv3d", conv_loss, [x, w], 1e-6)
    g = T.Tensor(rng.standard_normal((2, 4, 3, 3, 3)), requires_grad=True)
    check("gelu", lambda a: T.tensor_sum(T.mul(T.gelu(a), 0.3)), [g], 1e-6)
    # norm layers need a random linear functional: sum-of-squares of a
    # normalized output is nearly input-invariant and breaks the FD probe
    wts = rng.standard_normal((2, 4, 3, 3, 3))
    bn_g = T.Tensor(np.abs(rng.standard_normal(4)) + 0.5, requires_grad=True)
    bn_b = T.Tensor(rng.standard_normal(4), requires_grad=True)
    rm, rv = np.zeros(4), np.ones(4)
    check("batch_norm",
          lambda a, gg, bb: T.tensor_sum(T.mul(
              T.batch_norm(a, gg, bb, rm.copy(), rv.copy(), training=True),
              T.Tensor(wts))),
          [g, bn_g, bn_b], 1e-6)
    unit = LKAUnit(LKAParams(channels=3), rng=rng).to_dtype(np.float64)
    xu = T.Tensor(rng.standard_normal((1, 3, 7, 7, 7)), requires_grad=True)
    lin = T.Tensor(rng.standard_normal((1, 3, 7, 7, 7)))
    check("lka_unit", lambda a: T.tensor_sum(T.mul(unit(a), lin)), [xu], 1e-5)


class _Voxelwise(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv3d(2, 4, 1, rng=rng)
        self.head = Conv3d(4, 3, 1, rng=rng)

    def forward(self, x):
        return self.head(T.gelu(self.conv(x)))


def suite_sliding_window(corrupt=False):
    """Gaussian-merged sliding window equals whole-volume forward for a
    voxelwise model; single-window case is exact."""
    rng = np.random.default_rng(37)
    model = _Voxelwise(rng)
    model.eval()
    vol = Volume(rng.standard_normal((2, 24, 17, 21)).astype(np.float32))
    spec = WindowSpec(size=(16, 16, 16))
    merged = sliding_window(model, vol, spec).data
    if corrupt:
        model.head.weight.data *= 1.0 + 1e-3  # test hook: drift after merge
    with T.no_grad():
        direct = model(T.Tensor(vol.data[None])).data[0]
    err = np.abs(merged - direct).max()
    _require(err < 1e-5, f"multi-window mismatch: {err:.3e} >= 1e-5")
    single = Volume(rng.standard_normal((2, 16, 16, 16)).astype(np.float32))
    merged1 = sliding_window(model, single, spec).data
    with T.no_grad():
        direct1 = model(T.Tensor(single.data[None])).data[0]
    err1 = np.abs(merged1 - direct1).max()
    _require(err1 < 1e-6, f"single-window mismatch: {err1:.3e} >= 1e-6")


def _bf_components_count(mask, connectivity):
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=3)
               if o != (0, 0, 0)
               and sum(map(abs, o)) <= {6: 1, 18: 2, 26: 3}[connectivity]]
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
    return count


def _bf_surface(mask):
    out = np.zeros_like(mask)
    for idx in itertools.product(*(range(s) for s in mask.shape)):
        if not mask[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                nb = tuple(nb)
                if not all(0 <= nb[i] < mask.shape[i] for i in range(3)) or not mask[nb]:
                    out[idx] = True
    return out


def _bf_hd95(p, g, spacing):
    sp = np.argwhere(_bf_surface(p)) * spacing
    sg = np.argwhere(_bf_surface(g)) * spacing
    d_pg = [min(float(np.linalg.norm(a - b)) for b in sg) for a in sp]
    d_gp = [min(float(np.linalg.norm(a - b)) for b in sp) for a in sg]
    return max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))


def suite_metrics_bruteforce(corrupt=False):
    """dice/lcd/avd exact and hd95 within 1e-9 of exhaustive enumeration on
    random 4³ mask pairs, plus the worked examples."""
    rng = np.random.default_rng(53)
    spacing = np.array([1.0, 1.5, 2.0])
    for trial in range(40):
        p = rng.random((4, 4, 4)) > 0.6
        g = rng.random((4, 4, 4)) > 0.6
        union = int(p.sum()) + int(g.sum())
        d_ref = 1.0 if union == 0 else 2 * int((p & g).sum()) / union
        _require(dice(p, g) == d_ref, f"dice mismatch on trial {trial}")
        _require(lcd(p, g, 26) == abs(_bf_components_count(p, 26)
                                      - _bf_components_count(g, 26)),
                 f"lcd mismatch on trial {trial}")
        _require(avd(p, g, spacing) == abs(int(p.sum()) - int(g.sum())) * spacing.prod(),
                 f"avd mismatch on trial {trial}")
        if p.any() and g.any():
            h = hd95(p, g, spacing)
            _require(abs(h - _bf_hd95(p, g, spacing)) <= 1e-9,
                     f"hd95 mismatch on trial {trial}")
    # worked examples
    p = np.zeros((4, 4, 4), bool); p[0, 0, :4] = True
    g = np.zeros((4, 4, 4), bool); g[0, 0, :2] = True
    if corrupt:
        p[0, 0, 2] = False  # test hook: desync the mask from the known answer
    _require(abs(dice(p, g) - 2 / 3) < 1e-15, "dice worked example != 2/3")
    a = np.zeros((5, 5, 5), bool); a[2, 2, 0] = True
    b = np.zeros((5, 5, 5), bool); b[2, 2, 3] = True
    _require(hd95(a, b, (1, 1, 1)) == 3.0, "hd95 worked example != 3.0")


SUITES = {
    "kernel_composition": suite_kernel_composition,
    "gradient_checks": suite_gradient_checks,
    "sliding_window": suite_sliding_window,
    "metrics_bruteforce": suite_metrics_bruteforce,
}


def run_selftest(corrupt=None, printer=print):
    """Run every suite once; returns True iff all pass.

    ``corrupt`` names a suite to sabotage (default: the LKA3D_SELFTEST_CORRUPT
    environment variable), used to verify failure detection and reporting.
    """
    if corrupt is None:
        corrupt = os.environ.get(CORRUPT_ENV, "")
    if corrupt and corrupt not in SUITES:
        raise ValueError(f"unknown suite {corrupt!r}; choices: {sorted(SUITES)}")
    all_ok = True
    for name, fn in SUITES.items():
        start = time.perf_counter()
        try:
            fn(corrupt=(name == corrupt))
            status, detail = "PASS", ""
        except SelfTestFailure as exc:
            status, detail = "FAIL", f" [{exc}]"
            all_ok = False
        elapsed = time.perf_counter() - start
        printer(f"{name}: {status} ({elapsed:.1f}s){detail}")
    return all_ok
