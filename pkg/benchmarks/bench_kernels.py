#!/usr/bin/env python3
"""Benchmark the compiled vs pure-Python compositing kernels.

Times the forward render and the backward pass on synthetic maps of
increasing size, checks the two backends agree bitwise, and prints a
comparison table.

Usage: python benchmarks/bench_kernels.py [--image 64] [--repeats 5]
"""
import argparse
import time

import numpy as np

from dynsplat.geometry import CameraIntrinsics, Gaussian, GaussianMap, SE3Pose, se3_retract
from dynsplat.splat import RenderConfig, get_kernels
from dynsplat.splat.core import prepare_view


def random_map(n, seed):
    rng = np.random.default_rng(seed)
    m = GaussianMap()
    for _ in range(n):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        m.add(Gaussian(position=np.append(rng.uniform(-1.5, 1.5, 2), rng.uniform(2.0, 6.0)),
                       rotation=q, scale=rng.uniform(0.05, 0.25, 3),
                       opacity=rng.uniform(0.3, 0.9), color=rng.uniform(0, 1, 3)))
    return m


def bench(kernel, prep, cfg, lg, repeats):
    args = (prep.H, prep.W, prep.indptr, prep.gidx,
            np.ascontiguousarray(prep.means2d), np.ascontiguousarray(prep.prec),
            np.ascontiguousarray(prep.depths), np.ascontiguousarray(prep.colors),
            np.ascontiguousarray(prep.opacities),
            cfg.opacity_clamp, cfg.term_transmittance)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fwd = kernel.composite_forward(*args, None)
    t_fwd = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        bwd = kernel.composite_backward(*args, np.ascontiguousarray(lg[:, :, :3]),
                                        np.ascontiguousarray(lg[:, :, 3]))
    t_bwd = (time.perf_counter() - t0) / repeats
    return t_fwd, t_bwd, fwd, bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    kernels = get_kernels()
    if "cython" not in kernels:
        print("compiled kernel not built; benchmarking pure Python only")

    size = args.image
    k = CameraIntrinsics(size * 1.1, size * 1.1, size / 2, size / 2, size, size)
    pose = se3_retract(SE3Pose.identity(), np.array([0.01, -0.02, 0.0, 0.005, -0.01, 0.02]))
    cfg = RenderConfig()
    rng = np.random.default_rng(0)

    print(f"{'gaussians':>10} {'pixels':>8} {'entries':>9} "
          f"{'py fwd':>9} {'py bwd':>9} {'cy fwd':>9} {'cy bwd':>9} "
          f"{'speedup':>8} {'bitwise':>8}")
    for n in (50, 200, 800):
        gmap = random_map(n, seed=n)
        prep = prepare_view(gmap, pose, k, cfg)
        lg = rng.normal(size=(size, size, 4))
        tp_f, tp_b, fwd_p, bwd_p = bench(kernels["python"], prep, cfg, lg, max(1, args.repeats // 2))
        if "cython" in kernels:
            tc_f, tc_b, fwd_c, bwd_c = bench(kernels["cython"], prep, cfg, lg, args.repeats)
            exact = all(np.array_equal(a, b) for a, b in zip(fwd_p, fwd_c)) and \
                all(np.array_equal(a, b) for a, b in zip(bwd_p, bwd_c))
            speed = (tp_f + tp_b) / (tc_f + tc_b)
            print(f"{n:>10} {size*size:>8} {len(prep.gidx):>9} "
                  f"{tp_f*1e3:>8.1f}ms {tp_b*1e3:>8.1f}ms {tc_f*1e3:>8.2f}ms "
                  f"{tc_b*1e3:>8.2f}ms {speed:>7.1f}x {str(exact):>8}")
        else:
            print(f"{n:>10} {size*size:>8} {len(prep.gidx):>9} "
                  f"{tp_f*1e3:>8.1f}ms {tp_b*1e3:>8.1f}ms {'-':>9} {'-':>9} {'-':>8} {'-':>8}")


if __name__ == "__main__":
    main()
