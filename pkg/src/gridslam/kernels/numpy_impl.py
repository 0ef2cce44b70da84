"""Pure numpy implementations of the hot kernels.

Each function here has a numba twin in ``numba_impl`` with identical
semantics. Keep the two files in sync; the test suite compares them
element-wise on random inputs.
"""

import numpy as np

BACKEND_NAME = "numpy"

# Primitive kind codes shared with the simulator.
PRIM_SPHERE = 0
PRIM_BOX = 1
PRIM_HOLLOW_ROOM = 2


def gather_weighted(feats: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted gather of grid vertex features.

    Args:
        feats: [V, d] flattened vertex features.
        idx: [n, 8] int64 flat vertex indices per query (corner order fixed).
        w: [n, 8] interpolation weights.

    Returns:
        [n, d] array, ``sum_c w[j, c] * feats[idx[j, c]]``.
    """
    return np.einsum("jc,jcd->jd", w, feats[idx])


def scatter_weighted(grad_out: np.ndarray, idx: np.ndarray, w: np.ndarray,
                     n_vertices: int) -> np.ndarray:
    """Adjoint of gather_weighted with respect to the features."""
    d = grad_out.shape[1]
    out = np.zeros((n_vertices, d))
    contrib = w[:, :, None] * grad_out[:, None, :]
    np.add.at(out, idx.ravel(), contrib.reshape(-1, d))
    return out


def gather_dot(feats: np.ndarray, idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of gather_weighted with respect to the weights: [n, 8]."""
    return np.einsum("jcd,jd->jc", feats[idx], grad_out)


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3D convolution, kernel 3, stride 1, zero padding (shape preserving).

    Args:
        x: [Ci, X, Y, Z] input volume.
        w: [Co, Ci, 3, 3, 3] kernel.
        b: [Co] bias.
    """
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xp = np.zeros((ci, nx + 2, ny + 2, nz + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    y = np.empty((co, nx, ny, nz))
    y[:] = b[:, None, None, None]
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                patch = xp[:, a:a + nx, bb:bb + ny, c:c + nz]
                y += np.einsum("oi,ixyz->oxyz", w[:, :, a, bb, c], patch)
    return y


def conv3d_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of conv3d: returns (grad_x, grad_w, grad_b)."""
    ci, nx, ny, nz = x.shape
    xp = np.zeros((ci, nx + 2, ny + 2, nz + 2))
    xp[:, 1:-1, 1:-1, 1:-1] = x
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                patch = xp[:, a:a + nx, bb:bb + ny, c:c + nz]
                grad_w[:, :, a, bb, c] = np.einsum("oxyz,ixyz->oi", grad_y, patch)
                grad_xp[:, a:a + nx, bb:bb + ny, c:c + nz] += np.einsum(
                    "oi,oxyz->ixyz", w[:, :, a, bb, c], grad_y)
    grad_b = grad_y.sum(axis=(1, 2, 3))
    return grad_xp[:, 1:-1, 1:-1, 1:-1], grad_w, grad_b


def scatter_mean(idx: np.ndarray, vals: np.ndarray, n_cells: int):
    """Per-cell sum and count for voxel averaging.

    Args:
        idx: [n] int64 flat cell index per sample.
        vals: [n, c] values.

    Returns:
        (sums [n_cells, c], counts [n_cells]).
    """
    c = vals.shape[1]
    sums = np.zeros((n_cells, c))
    counts = np.zeros(n_cells)
    np.add.at(sums, idx, vals)
    np.add.at(counts, idx, 1.0)
    return sums, counts


def primitive_sdf(p: np.ndarray, kinds: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Min-union signed distance of the primitive list at points p [n, 3]."""
    n = p.shape[0]
    best = np.full(n, np.inf)
    for k in range(kinds.shape[0]):
        kind = kinds[k]
        pr = params[k]
        if kind == PRIM_SPHERE:
            d = np.linalg.norm(p - pr[:3], axis=1) - pr[3]
        elif kind == PRIM_BOX:
            d = _box_sdf(p, pr[:3], pr[3:6])
        elif kind == PRIM_HOLLOW_ROOM:
            outer = _box_sdf(p, pr[:3], pr[3:6] + pr[6])
            inner = _box_sdf(p, pr[:3], pr[3:6])
            d = np.maximum(outer, -inner)
        else:
            raise ValueError(f"unknown primitive kind {kind}")
        best = np.minimum(best, d)
    return best


def _box_sdf(p: np.ndarray, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def sphere_trace(origins: np.ndarray, dirs: np.ndarray, kinds: np.ndarray,
                 params: np.ndarray, max_range: float, eps: float,
                 max_steps: int):
    """March rays to the |sdf| < eps isosurface.

    Args:
        origins: [m, 3] ray origins.
        dirs: [m, 3] unit directions.

    Returns:
        (depth [m], hit [m] bool, origin_inside bool). Missed rays carry
        depth = max_range. origin_inside is True if any origin starts at
        sdf <= 0, in which case depths are meaningless.
    """
    m = origins.shape[0]
    t = np.zeros(m)
    active = np.ones(m, bool)
    hit = np.zeros(m, bool)
    d0 = primitive_sdf(origins, kinds, params)
    if np.any(d0 <= 0.0):
        return t, hit, True
    for _ in range(max_steps):
        if not np.any(active):
            break
        pts = origins[active] + t[active, None] * dirs[active]
        d = primitive_sdf(pts, kinds, params)
        conv = np.abs(d) < eps
        idx = np.flatnonzero(active)
        hit[idx[conv]] = True
        t[idx[~conv]] += d[~conv]
        active[idx[conv]] = False
        over = t > max_range
        active &= ~over
    t[~hit] = max_range
    return t, hit, False


def min_dists(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Distance from each point of a [n, 3] to its nearest point in b [m, 3]."""
    n = a.shape[0]
    out = np.empty(n)
    b_sq = np.einsum("ij,ij->i", b, b)
    for s in range(0, n, chunk):
        blk = a[s:s + chunk]
        d2 = (np.einsum("ij,ij->i", blk, blk)[:, None]
              + b_sq[None, :] - 2.0 * blk @ b.T)
        out[s:s + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out
