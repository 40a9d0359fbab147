"""Benchmark the rasterizer backends (compiled Cython vs numpy fallback).

Run:  python benchmarks/bench_rasterize.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mvflame._kernels import available_backends, get_backend
from mvflame.assets import make_mini_model
from mvflame.camera import look_at, project
from mvflame.decoder import FlameParams, decode


def scene(resolution):
    assets = make_mini_model(0)
    mesh = decode(assets, FlameParams.zeros(assets))
    cam = look_at((0.0, 0.0, 0.45), (0.0, 0.0, 0.0), fx=resolution,
                  fy=resolution, cx=resolution / 2, cy=resolution / 2,
                  width=resolution, height=resolution)
    pix, z = project(cam, mesh.vertices)
    xy = pix[mesh.faces]
    zf = z[mesh.faces]
    valid = (zf > 1e-9).all(axis=1).astype(np.uint8)
    return xy, zf, valid


def bench(kernel, args, repeats):
    kernel(*args)  # warm up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        kernel(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    opts = parser.parse_args()

    backends = available_backends()
    print(f"available backends: {', '.join(backends)}")
    print(f"{'resolution':>10} " + " ".join(f"{b:>12}" for b in backends)
          + f" {'speedup':>9}")
    for res in (64, 128, 256, 512):
        xy, zf, valid = scene(res)
        args = (xy, zf, valid, res, res, -1)
        times = [bench(get_backend(b), args, opts.repeats) for b in backends]
        row = f"{res:>10} " + " ".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f" {times[1] / times[0]:>8.1f}x"
        print(row)
    # sanity: identical outputs
    if len(backends) == 2:
        xy, zf, valid = scene(128)
        a = get_backend(backends[0])(xy, zf, valid, 128, 128, -1)
        b = get_backend(backends[1])(xy, zf, valid, 128, 128, -1)
        same = all(np.array_equal(x, y) for x, y in zip(a, b))
        print(f"backends bit-identical: {same}")


if __name__ == "__main__":
    main()
