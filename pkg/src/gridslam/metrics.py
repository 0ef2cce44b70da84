"""Evaluation utilities: field-vs-scene errors, pose errors, surface
cloud comparison, and slice export.

Field evaluators share one calling convention: fn(positions [n, 3])
returns (values [n], valid mask [n]).
"""

import numpy as np

from . import geometry, io, kernels
from .errors import EmptySet, LengthMismatch, ShapeMismatch, Uncovered
from .grid import eval_field, grid_mask
from .sim import scene_sdf

F_SCORE_THRESHOLD = 0.05
SURFACE_TOL = 1e-3
FD_STEP = 1e-4


def scene_field(scene):
    def fn(pos):
        pos = np.atleast_2d(pos)
        return scene_sdf(scene, pos), np.ones(pos.shape[0], bool)
    return fn


def grid_field(grid, decoder):
    def fn(pos):
        pos = np.atleast_2d(pos)
        mask = grid_mask(grid, pos)
        values = np.zeros(pos.shape[0])
        if mask.any():
            values[mask] = eval_field(grid, decoder, pos[mask])
        return values, mask
    return fn


def fused_field(graph):
    from .globalopt import fuse_query

    def fn(pos):
        pos = np.atleast_2d(pos)
        try:
            return fuse_query(graph, pos)
        except Uncovered:
            return np.zeros(pos.shape[0]), np.zeros(pos.shape[0], bool)
    return fn


def sampled_field(origin, cell_size: float, dims, values: np.ndarray,
                  covered: np.ndarray):
    """Evaluator over a scalar lattice (see grid.save_field).

    A query is valid when it lies in the box and all eight surrounding
    lattice vertices are covered.
    """
    from .interp import in_box_mask, trilinear_coords

    flat_vals = values.reshape(-1, 1)
    flat_cov = covered.reshape(-1).astype(float)

    def fn(pos):
        pos = np.atleast_2d(pos)
        mask = in_box_mask(pos, origin, cell_size, dims)
        out = np.zeros(pos.shape[0])
        if mask.any():
            idx, w, _ = trilinear_coords(pos[mask], origin, cell_size, dims)
            corner_cov = flat_cov[idx].min(axis=1) > 0.0
            vals = kernels.gather_weighted(flat_vals, idx, w)[:, 0]
            sub = np.zeros(mask.sum())
            sub[corner_cov] = vals[corner_cov]
            out[mask] = sub
            full = mask.copy()
            full[mask] = corner_cov
            return out, full
        return out, mask
    return fn


def sample_near_surface(scene, bounds_lo, bounds_hi, n_samples: int,
                        band: float, rng: np.random.Generator,
                        max_tries: int = 200) -> np.ndarray:
    """Uniform samples with |scene sdf| <= band, by rejection."""
    lo = np.asarray(bounds_lo, float)
    hi = np.asarray(bounds_hi, float)
    out = []
    have = 0
    for _ in range(max_tries):
        cand = rng.uniform(lo, hi, size=(max(4 * n_samples, 256), 3))
        keep = cand[np.abs(scene_sdf(scene, cand)) <= band]
        if keep.shape[0]:
            out.append(keep)
            have += keep.shape[0]
        if have >= n_samples:
            break
    if have < n_samples:
        raise EmptySet(
            f"rejection sampling found {have}/{n_samples} points")
    return np.concatenate(out, axis=0)[:n_samples]


def sdf_mae(field_fn, scene, bounds_lo, bounds_hi,
            rng: np.random.Generator, n_samples: int = 2000,
            band: float = 0.1) -> float:
    """Mean |field - true sdf| over near-surface samples.

    Samples the field fails to cover are excluded; raises EmptySet if
    none remain.
    """
    pts = sample_near_surface(scene, bounds_lo, bounds_hi, n_samples, band,
                              rng)
    values, valid = field_fn(pts)
    if not valid.any():
        raise EmptySet("field covers none of the evaluation samples")
    truth = scene_sdf(scene, pts)
    return float(np.mean(np.abs(values[valid] - truth[valid])))


def pose_rmse(poses_est, poses_gt):
    """(rotation RMSE deg, translation RMSE m) after first-pose alignment.

    Both trajectories are expressed relative to their own first pose, so
    a shared rigid offset does not count as error.
    """
    if len(poses_est) != len(poses_gt):
        raise LengthMismatch(
            f"{len(poses_est)} estimates vs {len(poses_gt)} references")
    if not poses_est:
        raise EmptySet("no poses to compare")
    align = geometry.compose(poses_gt[0], geometry.inverse(poses_est[0]))
    rot_sq, tran_sq = [], []
    for est, gt in zip(poses_est, poses_gt):
        rot, tran = geometry.pose_error(gt, geometry.compose(align, est))
        rot_sq.append(rot * rot)
        tran_sq.append(tran * tran)
    return float(np.sqrt(np.mean(rot_sq))), float(np.sqrt(np.mean(tran_sq)))


def chamfer_l1(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two clouds."""
    points_a = np.atleast_2d(points_a)
    points_b = np.atleast_2d(points_b)
    if points_a.shape[0] == 0 or points_b.shape[0] == 0:
        raise EmptySet("chamfer distance needs two non-empty clouds")
    d_ab = kernels.min_dists(points_a, points_b)
    d_ba = kernels.min_dists(points_b, points_a)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def f_score(points_pred: np.ndarray, points_gt: np.ndarray,
            threshold: float = F_SCORE_THRESHOLD) -> float:
    """Harmonic mean of precision and recall at the distance threshold,
    as a percentage."""
    points_pred = np.atleast_2d(points_pred)
    points_gt = np.atleast_2d(points_gt)
    if points_pred.shape[0] == 0 or points_gt.shape[0] == 0:
        raise EmptySet("f-score needs two non-empty clouds")
    precision = float(np.mean(kernels.min_dists(points_pred, points_gt)
                              <= threshold))
    recall = float(np.mean(kernels.min_dists(points_gt, points_pred)
                           <= threshold))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def surface_points_from_field(field_fn, seeds: np.ndarray,
                              max_steps: int = 10, tol: float = SURFACE_TOL,
                              fd_step: float = FD_STEP) -> np.ndarray:
    """Project seed points onto the field's zero set by damped Newton.

    Gradients come from central differences. Points that end up outside
    coverage or farther than tol from the zero set are dropped.
    """
    x = np.atleast_2d(np.asarray(seeds, float)).copy()
    for _ in range(max_steps):
        h, valid = field_fn(x)
        active = valid & (np.abs(h) >= tol)
        if not active.any():
            break
        xa = x[active]
        grad = np.zeros_like(xa)
        for k in range(3):
            step = np.zeros(3)
            step[k] = fd_step
            hp, vp = field_fn(xa + step)
            hm, vm = field_fn(xa - step)
            grad[:, k] = np.where(vp & vm, (hp - hm) / (2.0 * fd_step), 0.0)
        norm_sq = (grad * grad).sum(axis=1)
        ok = norm_sq > 1e-12
        shift = np.zeros_like(xa)
        shift[ok] = grad[ok] * (h[active][ok] / norm_sq[ok])[:, None]
        x[active] = xa - shift
    h, valid = field_fn(x)
    keep = valid & (np.abs(h) < tol)
    if not keep.any():
        raise EmptySet("no seed converged onto the surface")
    return x[keep]


def surface_cloud(field_fn, scene, bounds_lo, bounds_hi, n_points: int,
                  rng: np.random.Generator, band: float = 0.1) -> np.ndarray:
    """Near-surface seeds refined onto the field's zero set."""
    seeds = sample_near_surface(scene, bounds_lo, bounds_hi, n_points, band,
                                rng)
    return surface_points_from_field(field_fn, seeds)


# ---- slice export ----

_SLICE_AXES = {"x": (1, 2), "y": (0, 2), "z": (0, 1)}


def export_slice(field_fn, axis: str, coord: float, bounds_lo, bounds_hi,
                 res: int, csv_path, pgm_path=None) -> np.ndarray:
    """Sample the field on an axis-aligned plane and write it out.

    The CSV holds one row per sample (x, y, z, value, valid); the
    optional PGM is an 8-bit preview normalized to the slice's value
    range, with uncovered samples black. Returns the [res, res] values.
    """
    if axis not in _SLICE_AXES:
        raise ShapeMismatch(f"axis must be one of {sorted(_SLICE_AXES)}")
    lo = np.asarray(bounds_lo, float)
    hi = np.asarray(bounds_hi, float)
    a0, a1 = _SLICE_AXES[axis]
    u = np.linspace(lo[a0], hi[a0], res)
    v = np.linspace(lo[a1], hi[a1], res)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.zeros((res * res, 3))
    pts[:, a0] = uu.ravel()
    pts[:, a1] = vv.ravel()
    pts[:, "xyz".index(axis)] = coord

    values, valid = field_fn(pts)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("x,y,z,value,valid\n")
        for p, val, ok in zip(pts, values, valid):
            fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},"
                     f"{val:.17g},{int(ok)}\n")
    if pgm_path is not None:
        _write_pgm(pgm_path, values.reshape(res, res),
                   valid.reshape(res, res))
    return values.reshape(res, res)


def _write_pgm(path, values: np.ndarray, valid: np.ndarray) -> None:
    span = np.abs(values[valid]).max() if valid.any() else 1.0
    span = span if span > 0.0 else 1.0
    shade = np.clip((values / span + 1.0) * 0.5, 0.0, 1.0)
    img = (shade * 255.0).astype(np.uint8)
    img[~valid] = 0
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def save_report(path, metrics: dict) -> None:
    """Write metrics as key = value lines (floats at full precision)."""
    cfg = io.Config()
    for key, value in metrics.items():
        if isinstance(value, float):
            cfg.set(key, f"{value:.17g}")
        else:
            cfg.set(key, value)
    cfg.save(path)
