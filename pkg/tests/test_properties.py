"""Property-based tests for the algebraic invariants."""

import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lka3d import tensor as T
from lka3d.blocks import LKAParams
from lka3d.inference import window_origins
from lka3d.metrics import dice
from lka3d.pipeline import Volume, read_rvf, write_rvf
from lka3d.training import clip_grad_norm, smoothed

from oracles import bf_dice

MODEST = settings(max_examples=40, deadline=None)


class TestDiceProperties:
    @MODEST
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_bounds_symmetry_oracle(self, seed, dp, dg):
        rng = np.random.default_rng(seed)
        p = rng.random((4, 4, 4)) < dp
        g = rng.random((4, 4, 4)) < dg
        d = dice(p, g)
        assert 0.0 <= d <= 1.0
        assert d == dice(g, p)
        assert d == bf_dice(p, g)
        assert dice(p, p) == 1.0


class TestComposedSupport:
    @MODEST
    @given(st.sampled_from([1, 3, 5, 7]), st.sampled_from([1, 3, 5, 7]),
           st.integers(1, 3))
    def test_support_formula(self, k1, k2, d2):
        params = LKAParams(channels=2, dw_kernel=k1, dilated_kernel=k2,
                           dilation=d2)
        expect = (k1 - 1) * 1 + (k2 - 1) * d2 + 1
        assert params.composed_support == expect


class TestConvSpecOutShape:
    @MODEST
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
           st.integers(0, 4), st.integers(5, 20))
    def test_matches_enumeration(self, k, s, d, p, size):
        spec = T.ConvSpec(kernel=k, stride=s, dilation=d, padding=p)
        eff = (k - 1) * d + 1
        padded = size + 2 * p
        if padded < eff:
            with pytest.raises(ValueError):
                spec.out_shape((size, size, size))
            return
        expect = sum(1 for start in range(0, padded - eff + 1, s))
        assert spec.out_shape((size, size, size)) == (expect,) * 3

    @MODEST
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2),
           st.integers(3, 12))
    def test_transpose_inverts_forward(self, k, s, p, size):
        if k < s or k - 2 * p < 1:
            return
        fwd = T.ConvSpec(kernel=k, stride=s, padding=p)
        try:
            out = fwd.out_shape((size,) * 3)
        except ValueError:
            return
        back = T.ConvSpec(kernel=k, stride=s, padding=p, transpose=True)
        restored = back.out_shape(out)
        # transposed conv recovers the size up to the stride remainder
        assert all(size - s < r <= size + 2 * p for r in restored)


class TestClipNorm:
    @MODEST
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 20.0))
    def test_postcondition(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        params = []
        for shape in ((3, 2), (4,), (2, 2, 2)):
            t = T.Tensor(np.zeros(shape), requires_grad=True)
            t.grad = rng.standard_normal(shape)
            params.append(t)
        before = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
        returned = clip_grad_norm(params, max_norm)
        after = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
        assert returned == pytest.approx(before, rel=1e-12)
        assert after <= max_norm * (1 + 1e-9)
        if before <= max_norm:
            assert after == pytest.approx(before, rel=1e-12)


class TestRVFRoundtrip:
    @MODEST
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3),
           st.sampled_from(["f32", "u8"]),
           st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
    def test_lossless(self, seed, channels, kind, shape):
        rng = np.random.default_rng(seed)
        if kind == "f32":
            data = rng.standard_normal((channels,) + shape).astype(np.float32)
        else:
            data = rng.integers(0, 4, (channels,) + shape).astype(np.uint8)
        vol = Volume(data, spacing_mm=(0.5, 1.0, 2.0))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "v.rvf")
            write_rvf(vol, path)
            back = read_rvf(path)
        assert back.data.dtype == data.dtype
        assert np.array_equal(back.data, data)
        assert back.spacing_mm == pytest.approx(vol.spacing_mm)


class TestSmoothedBlocks:
    @MODEST
    @given(st.lists(st.floats(-100, 100), min_size=0, max_size=60),
           st.integers(1, 10))
    def test_block_count_and_means(self, values, window):
        blocks = smoothed(values, window)
        assert len(blocks) == len(values) // window
        for i, b in enumerate(blocks):
            chunk = values[i * window:(i + 1) * window]
            assert b == pytest.approx(float(np.mean(chunk)), abs=1e-9)


class TestWindowOriginsCoverage:
    @MODEST
    @given(st.integers(8, 90), st.integers(4, 32), st.floats(0.0, 0.9))
    def test_full_coverage_sorted_first_last(self, extent, window, overlap):
        if extent < window:
            with pytest.raises(ValueError):
                window_origins(extent, window, overlap)
            return
        origins = window_origins(extent, window, overlap)
        assert origins[0] == 0
        assert origins[-1] == extent - window
        assert origins == sorted(origins)
        covered = np.zeros(extent, bool)
        for o in origins:
            covered[o:o + window] = True
        assert covered.all()
