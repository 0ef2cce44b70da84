"""Trilinear interpolation coordinates shared by grid queries and the tape.

A level's vertices form a (nx, ny, nz) lattice with spacing cell_size
starting at origin. Features are stored flattened C-order, so vertex
(ix, iy, iz) lives at flat index (ix*ny + iy)*nz + iz. Corner order for
the 8 cell corners is c = 4*dx + 2*dy + dz with d* in {0, 1}.
"""

import numpy as np

from .errors import OutOfBounds

# Relative slack for queries on the box boundary.
BOUNDS_TOL = 1e-9

_CORNERS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
    dtype=np.int64)


def box_of(origin: np.ndarray, cell_size: float, dims) -> tuple:
    """(lo, hi) corners of the lattice bounding box."""
    lo = np.asarray(origin, float)
    hi = lo + cell_size * (np.asarray(dims, float) - 1.0)
    return lo, hi


def check_in_box(pos: np.ndarray, origin: np.ndarray, cell_size: float,
                 dims) -> None:
    """Raise OutOfBounds if any point exceeds the box by > tol."""
    lo, hi = box_of(origin, cell_size, dims)
    tol = BOUNDS_TOL * cell_size
    bad = np.any(pos < lo - tol, axis=-1) | np.any(pos > hi + tol, axis=-1)
    if np.any(bad):
        first = np.atleast_2d(pos)[np.atleast_1d(bad)][0]
        raise OutOfBounds(f"query {first} outside grid box [{lo}, {hi}]")


def in_box_mask(pos: np.ndarray, origin: np.ndarray, cell_size: float,
                dims) -> np.ndarray:
    """Boolean [n] mask of points inside the box (with boundary slack)."""
    lo, hi = box_of(origin, cell_size, dims)
    tol = BOUNDS_TOL * cell_size
    return np.all(pos >= lo - tol, axis=-1) & np.all(pos <= hi + tol, axis=-1)


def trilinear_coords(pos: np.ndarray, origin: np.ndarray, cell_size: float,
                     dims):
    """Corner indices, weights, and weight-position Jacobian per query.

    Positions are clamped into the lattice, so callers that allow
    out-of-box queries must mask those contributions themselves.

    Args:
        pos: [n, 3] query positions.

    Returns:
        idx: [n, 8] int64 flat vertex indices.
        w: [n, 8] trilinear weights (partition of unity for in-box pos).
        dw: [n, 8, 3] derivative of each weight w.r.t. the position.
    """
    dims = np.asarray(dims, np.int64)
    u = (pos - np.asarray(origin, float)) / cell_size
    base = np.floor(u).astype(np.int64)
    # Upper-face queries land in the last cell; far-out queries clamp too
    # (their weights are garbage but callers mask them).
    base = np.clip(base, 0, dims - 2)
    t = u - base
    t = np.clip(t, 0.0, 1.0)

    corner_idx = base[:, None, :] + _CORNERS[None, :, :]
    ny, nz = int(dims[1]), int(dims[2])
    idx = (corner_idx[..., 0] * ny + corner_idx[..., 1]) * nz + corner_idx[..., 2]

    # Per-axis weight pairs: axis weight is (1-t) for corner bit 0, t for 1.
    wx = np.where(_CORNERS[None, :, 0] == 0, 1.0 - t[:, None, 0], t[:, None, 0])
    wy = np.where(_CORNERS[None, :, 1] == 0, 1.0 - t[:, None, 1], t[:, None, 1])
    wz = np.where(_CORNERS[None, :, 2] == 0, 1.0 - t[:, None, 2], t[:, None, 2])
    w = wx * wy * wz

    sx = np.where(_CORNERS[None, :, 0] == 0, -1.0, 1.0) / cell_size
    sy = np.where(_CORNERS[None, :, 1] == 0, -1.0, 1.0) / cell_size
    sz = np.where(_CORNERS[None, :, 2] == 0, -1.0, 1.0) / cell_size
    dw = np.empty((pos.shape[0], 8, 3))
    dw[:, :, 0] = sx * wy * wz
    dw[:, :, 1] = wx * sy * wz
    dw[:, :, 2] = wx * wy * sz
    return idx, w, dw
