"""Compare the compiled convolution kernels against the numpy fallback.

Times the depthwise kernels that dominate LKA inference plus a full LKA
block forward/backward, for both backends, and prints throughput and
speedup.  Run from the repo root:

    python3 benchmarks/benchmark_conv.py [--quick]
"""

import argparse
import time

import numpy as np

from lka3d import tensor as T
from lka3d._kernels import HAVE_EXT, backend_mode, conv_forward, set_backend_mode
from lka3d.blocks import BlockParams, LKABlock


def time_fn(fn, min_repeats=3):
    fn()  # warmup
    best = float("inf")
    for _ in range(min_repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def conv_case(name, shape, kernel, dilation, channels, quick):
    if quick:
        shape = tuple(s // 2 for s in shape)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, channels) + shape, dtype=np.float64).astype(np.float32)
    w = rng.standard_normal((channels, 1, kernel, kernel, kernel)).astype(np.float32)
    pad = dilation * (kernel - 1) // 2
    macs = np.prod(shape) * channels * kernel ** 3

    def run():
        conv_forward(x, w, None, (1, 1, 1), (dilation,) * 3, (pad,) * 3, channels)

    return name, macs, run


def block_case(channels, shape, quick):
    if quick:
        shape = tuple(s // 2 for s in shape)
    rng = np.random.default_rng(1)
    params = BlockParams(in_channels=channels, out_channels=channels, repeats=1,
                         embed_stride=1, ffn_expansion=4.0, layer_scale_init=1e-2)
    block = LKABlock(params, rng)

    def run():
        x = T.Tensor(rng.standard_normal((1, channels) + shape).astype(np.float32),
                     requires_grad=True)
        out = block(x)
        T.tensor_sum(out).backward()

    return f"LKA block fwd+bwd C={channels} {shape[0]}^3", None, run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="halve problem sizes")
    args = ap.parse_args()

    cases = [
        conv_case("depthwise 5^3 C=32 64^3", (64, 64, 64), 5, 1, 32, args.quick),
        conv_case("dilated depthwise 7^3 d3 C=32 64^3", (64, 64, 64), 7, 3, 32, args.quick),
        conv_case("depthwise 5^3 C=80 32^3", (32, 32, 32), 5, 1, 80, args.quick),
        block_case(16, (32, 32, 32), args.quick),
    ]

    modes = ["numpy"] + (["direct", "auto"] if HAVE_EXT else [])
    if not HAVE_EXT:
        print("compiled extension not available; benchmarking numpy fallback only")
    print(f"{'case':45s} " + " ".join(f"{m:>12s}" for m in modes) + "   speedup")
    original = backend_mode()
    try:
        for name, macs, run in cases:
            times = []
            for mode in modes:
                set_backend_mode(mode)
                times.append(time_fn(run))
            cells = []
            for t in times:
                if macs:
                    cells.append(f"{macs / t / 1e9:9.2f} GM/s")
                else:
                    cells.append(f"{t:10.3f} s")
            speed = f"{times[0] / times[-1]:8.2f}x" if len(times) > 1 else "       -"
            print(f"{name:45s} " + " ".join(f"{c:>12s}" for c in cells) + speed)
    finally:
        set_backend_mode(original)


if __name__ == "__main__":
    main()
