"""Compare the jit-compiled and pure-numpy renderer backends.

Both backends are bit-identical by construction (polynomial-only math and
8-bit output quantization); this script measures the speed difference.

Usage: python benchmarks/bench_render.py [--frames 64] [--size 64]
"""

import argparse
import os
import time

import numpy as np


def run(backend: str, frames: int, size: int) -> float:
    os.environ["VFSWAP_NUMBA"] = "1" if backend == "numba" else "0"
    import importlib

    from vfswap import render_kernels, videodata
    importlib.reload(render_kernels)

    params = videodata.identity_params(3)
    # warm up (includes jit compilation for the numba backend)
    render_kernels.render_frame(params, 0.1, 0.5, 0.2, 0.0, (size, size))
    t0 = time.perf_counter()
    for i in range(frames):
        pose = -1.0 + 2.0 * i / max(frames - 1, 1)
        render_kernels.render_frame(params, pose, 0.5, 0.2, 0.0, (size, size))
    return (time.perf_counter() - t0) / frames


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=64)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()

    t_numpy = run("numpy", args.frames, args.size)
    t_numba = run("numba", args.frames, args.size)
    print(f"frame size  : {args.size}x{args.size}")
    print(f"numpy  : {t_numpy * 1e3:8.3f} ms/frame")
    print(f"numba  : {t_numba * 1e3:8.3f} ms/frame")
    print(f"speedup: {t_numpy / t_numba:8.2f}x")

    # confirm the backends agree bit-for-bit on a sweep
    os.environ["VFSWAP_NUMBA"] = "0"
    from vfswap import render_kernels, videodata
    params = videodata.identity_params(7)
    rng = np.random.default_rng(0)
    kern = render_kernels._get_numba_kernel()
    for _ in range(16):
        pose, light, expr = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(-1, 1)
        a, ma = render_kernels.render_frame_numpy(params, pose, light, expr, 0.0,
                                                  (args.size, args.size))
        b = np.empty_like(a)
        mb = np.empty_like(ma)
        kern(params, pose, light, expr, 0.0, b, mb)
        assert np.array_equal(a, b) and np.array_equal(ma, mb)
    print("backend agreement: bit-identical on 16 random factor draws")


if __name__ == "__main__":
    main()
