"""Timing comparison of the two kernel backends.

Runs every hot kernel on workloads sized like a real room reconstruction,
checks that both implementations agree, and prints per-kernel timings.

    python3 benchmarks/kernel_bench.py --points 200000 --repeats 5
"""

import argparse
import time

import numpy as np

import gridslam.sim as sim
from gridslam.kernels import numba_impl, numpy_impl


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def build_workloads(n_points, rng):
    dims = (30, 25, 16)
    n_vertices = int(np.prod(dims))
    d = 4
    feats = rng.normal(size=(n_vertices, d))
    idx = rng.integers(0, n_vertices, size=(n_points, 8))
    w = rng.random((n_points, 8))
    w /= w.sum(axis=1, keepdims=True)
    grad_out = rng.normal(size=(n_points, d))

    x = rng.normal(size=(3,) + dims)
    conv_w = rng.normal(size=(6, 3, 3, 3, 3)) * 0.1
    conv_b = rng.normal(size=6) * 0.1
    grad_y = rng.normal(size=(6,) + dims)

    n_cells = 40_000
    cell_idx = rng.integers(0, n_cells, size=n_points)
    cell_vals = rng.normal(size=(n_points, 3))

    scene = sim.default_room_scene()
    kinds, params = scene.to_arrays()
    pts = rng.uniform(scene.bounds_lo, scene.bounds_hi, size=(n_points, 3))

    sensor = sim.SensorModel(n_azimuth=120, n_elevation=40)
    dirs = sensor.ray_directions()
    origins = np.broadcast_to(np.array([0.0, 0.0, 1.5]),
                              dirs.shape).astype(float).copy()

    cloud_a = rng.normal(size=(4000, 3))
    cloud_b = rng.normal(size=(4000, 3))

    return [
        ("gather_weighted", "gather_weighted", (feats, idx, w)),
        ("scatter_weighted", "scatter_weighted",
         (grad_out, idx, w, n_vertices)),
        ("gather_dot", "gather_dot", (feats, idx, grad_out)),
        ("conv3d", "conv3d", (x, conv_w, conv_b)),
        ("conv3d_backward", "conv3d_backward", (grad_y, x, conv_w)),
        ("scatter_mean", "scatter_mean", (cell_idx, cell_vals, n_cells)),
        ("primitive_sdf", "primitive_sdf", (pts, kinds, params)),
        ("sphere_trace", "sphere_trace",
         (origins, dirs, kinds, params, sensor.max_range, sim.SURFACE_EPS,
          sim.MAX_TRACE_STEPS)),
        ("min_dists", "min_dists", (cloud_a, cloud_b)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=200_000,
                    help="query count for the point-heavy kernels")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rtol", type=float, default=1e-9,
                    help="relative agreement tolerance between backends")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    workloads = build_workloads(args.points, rng)

    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} "
          f"{'speedup':>8} {'max diff':>10}")
    for label, name, call_args in workloads:
        np_fn = getattr(numpy_impl, name)
        nb_fn = getattr(numba_impl, name)
        ref = np_fn(*call_args)
        got = nb_fn(*call_args)  # first call also pays the compile cost
        diff = max_diff(ref, got)
        scale = max(1.0, max_diff(ref, np.zeros(1)))
        if diff > args.rtol * scale:
            raise SystemExit(f"{label}: backends disagree (diff {diff:.3e})")
        t_np = best_of(np_fn, call_args, args.repeats)
        t_nb = best_of(nb_fn, call_args, args.repeats)
        print(f"{label:<18} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} "
              f"{t_np / t_nb:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
