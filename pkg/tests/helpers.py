"""Shared test utilities: finite differences and tiny problem builders."""

import numpy as np

import gridslam.geometry as geo
from gridslam.costs import KIND_FREE_SPACE, KIND_NEAR_SURFACE, PointSet
from gridslam.grid import Decoder, MultiresGrid
from gridslam.local import Frame, Submap


def fd_gradient(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f() wrt array x.

    x is mutated in place component by component; f must re-read it on
    every call.
    """
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        g[i] = (up - dn) / (2.0 * h)
    return g.reshape(x.shape)


def fd_directional(f, x, v, h=1e-6):
    """Central difference of f along direction v (same shape as x)."""
    flat = x.ravel()
    step = v.ravel()
    orig = flat.copy()
    flat += h * step
    up = f()
    flat[:] = orig - h * step
    dn = f()
    flat[:] = orig
    return (up - dn) / (2.0 * h)


def rel_err(got, want):
    want = np.asarray(want, float)
    got = np.asarray(got, float)
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want)) / denom


def random_rotation(rng):
    w = rng.normal(size=3)
    w *= rng.uniform(0.1, 2.5) / np.linalg.norm(w)
    return geo.so3_exp(w)


def random_pose(rng, tran_scale=1.0):
    return geo.Pose(rotation=random_rotation(rng),
                    translation=rng.normal(size=3) * tran_scale)


def random_points(rng, n, lo=0.1, hi=0.9):
    """Labeled points with kink arguments kept away from zero."""
    pos = rng.uniform(lo, hi, size=(n, 3))
    kind = np.where(rng.uniform(size=n) < 0.5, KIND_NEAR_SURFACE,
                    KIND_FREE_SPACE)
    sdf = rng.uniform(0.05, 0.3, size=n) * rng.choice([-1.0, 1.0], size=n)
    bound_lo = rng.uniform(-0.4, -0.2, size=n)
    bound_hi = rng.uniform(0.2, 0.4, size=n)
    return PointSet(pos, kind, sdf=sdf, weight=np.ones(n),
                    bound_lo=bound_lo, bound_hi=bound_hi)


def tiny_submap(rng, sid=0, n_frames=2, n_points=10, feature_dim=2,
                cell_sizes=(0.5, 0.25), feat_scale=0.1, base_pose=None,
                decoder=None, pose_scale=0.02):
    """Unit-box submap with random features and labeled points."""
    lo, hi = np.zeros(3), np.ones(3)
    grid = MultiresGrid.create(lo, hi, list(cell_sizes), feature_dim,
                               pad=False)
    for lvl in grid.levels:
        lvl.features = rng.normal(size=lvl.features.shape) * feat_scale
    frames = []
    for k in range(n_frames):
        pose = geo.Pose(rotation=geo.so3_exp(rng.normal(size=3) * pose_scale),
                        translation=rng.normal(size=3) * pose_scale)
        pts = random_points(rng, n_points)
        local = geo.transform_point(pose, pts.pos)
        pts = pts.select(np.all((local > 0.02) & (local < 0.98), axis=1))
        frames.append(Frame(pose, pts, index=k))
    base = base_pose if base_pose is not None \
        else geo.identity_pose()
    sm = Submap(sid, base, frames, lo, hi)
    sm.grid = grid
    sm.decoder = decoder if decoder is not None \
        else Decoder.canonical_linear(grid.n_levels, feature_dim)
    return sm


def manual_trilinear_row(x, origin, cell, dims, n_vertices, d):
    """Independent sparse interpolation row for the solve oracle."""
    rel = (np.asarray(x) - origin) / cell
    base = np.floor(rel).astype(int)
    base = np.minimum(np.maximum(base, 0), np.array(dims) - 2)
    frac = rel - base
    row = np.zeros(n_vertices * d)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                wx = frac[0] if cx else 1.0 - frac[0]
                wy = frac[1] if cy else 1.0 - frac[1]
                wz = frac[2] if cz else 1.0 - frac[2]
                flat = ((base[0] + cx) * dims[1] + base[1] + cy) * dims[2] \
                    + base[2] + cz
                row[flat * d:(flat + 1) * d] += wx * wy * wz
    return row


def dense_solve_oracle(sm, level, damp=0.0):
    """Assemble the normal equations from scratch, solve by pinv
    (or a damped direct solve when damp > 0)."""
    from gridslam.costs import KIND_NEAR_SURFACE
    from gridslam.grid import eval_field

    lvl = sm.grid.levels[level]
    d = sm.grid.feature_dim
    w_lvl = sm.decoder.level_weights(level, d)
    pts = sm.points_in_submap_frame()
    pts = pts.select(pts.kind == KIND_NEAR_SURFACE)
    lo, hi = sm.grid.box()
    inside = np.all((pts.pos >= lo) & (pts.pos <= hi), axis=1)
    pts = pts.select(inside)
    h_prior = eval_field(sm.grid, sm.decoder, pts.pos,
                         active_levels=level)
    r = h_prior - pts.sdf
    rows = []
    for i in range(len(pts)):
        base_row = manual_trilinear_row(pts.pos[i], lvl.origin,
                                        lvl.cell_size, lvl.dims,
                                        lvl.n_vertices, d)
        rows.append(base_row * np.tile(w_lvl, lvl.n_vertices))
    jmat = np.array(rows)
    nmat = jmat.T @ jmat
    if damp > 0.0:
        nmat = nmat + damp ** 2 * np.eye(nmat.shape[0])
        sol = -np.linalg.solve(nmat, jmat.T @ r)
    else:
        sol = -np.linalg.pinv(nmat, rcond=1e-10, hermitian=True) @ (jmat.T @ r)
    return sol.reshape(tuple(lvl.dims) + (d,)), jmat, r


def quad_objective(sm, level):
    """Sum of squared near-surface residuals with finer levels zero."""
    from gridslam.costs import KIND_NEAR_SURFACE
    from gridslam.grid import eval_field

    pts = sm.points_in_submap_frame()
    pts = pts.select(pts.kind == KIND_NEAR_SURFACE)
    lo, hi = sm.grid.box()
    pts = pts.select(np.all((pts.pos >= lo) & (pts.pos <= hi), axis=1))
    h = eval_field(sm.grid, sm.decoder, pts.pos, active_levels=level + 1)
    return float(np.sum((h - pts.sdf) ** 2))
