"""Numba twins of the numpy kernels.

Same call signatures and semantics as ``numpy_impl``. All jitted
functions run sequentially (no prange) so results are deterministic for
a fixed input, and ``cache=True`` keeps compilation one-time per
machine.
"""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"

PRIM_SPHERE = 0
PRIM_BOX = 1
PRIM_HOLLOW_ROOM = 2


@njit(cache=True)
def gather_weighted(feats, idx, w):
    n = idx.shape[0]
    d = feats.shape[1]
    out = np.zeros((n, d))
    for j in range(n):
        for c in range(8):
            v = idx[j, c]
            wc = w[j, c]
            for k in range(d):
                out[j, k] += wc * feats[v, k]
    return out


@njit(cache=True)
def scatter_weighted(grad_out, idx, w, n_vertices):
    n, d = grad_out.shape
    out = np.zeros((n_vertices, d))
    for j in range(n):
        for c in range(8):
            v = idx[j, c]
            wc = w[j, c]
            for k in range(d):
                out[v, k] += wc * grad_out[j, k]
    return out


@njit(cache=True)
def gather_dot(feats, idx, grad_out):
    n = idx.shape[0]
    d = feats.shape[1]
    out = np.zeros((n, 8))
    for j in range(n):
        for c in range(8):
            v = idx[j, c]
            acc = 0.0
            for k in range(d):
                acc += feats[v, k] * grad_out[j, k]
            out[j, c] = acc
    return out


@njit(cache=True)
def conv3d(x, w, b):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    y = np.empty((co, nx, ny, nz))
    for o in range(co):
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    acc = b[o]
                    for i in range(ci):
                        for a in range(3):
                            jx = ix + a - 1
                            if jx < 0 or jx >= nx:
                                continue
                            for bb in range(3):
                                jy = iy + bb - 1
                                if jy < 0 or jy >= ny:
                                    continue
                                for c in range(3):
                                    jz = iz + c - 1
                                    if jz < 0 or jz >= nz:
                                        continue
                                    acc += w[o, i, a, bb, c] * x[i, jx, jy, jz]
                    y[o, ix, iy, iz] = acc
    return y


@njit(cache=True)
def conv3d_backward(grad_y, x, w):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(w)
    grad_b = np.zeros(co)
    for o in range(co):
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    g = grad_y[o, ix, iy, iz]
                    grad_b[o] += g
                    for i in range(ci):
                        for a in range(3):
                            jx = ix + a - 1
                            if jx < 0 or jx >= nx:
                                continue
                            for bb in range(3):
                                jy = iy + bb - 1
                                if jy < 0 or jy >= ny:
                                    continue
                                for c in range(3):
                                    jz = iz + c - 1
                                    if jz < 0 or jz >= nz:
                                        continue
                                    grad_w[o, i, a, bb, c] += g * x[i, jx, jy, jz]
                                    grad_x[i, jx, jy, jz] += g * w[o, i, a, bb, c]
    return grad_x, grad_w, grad_b


@njit(cache=True)
def scatter_mean(idx, vals, n_cells):
    n, c = vals.shape
    sums = np.zeros((n_cells, c))
    counts = np.zeros(n_cells)
    for j in range(n):
        cell = idx[j]
        counts[cell] += 1.0
        for k in range(c):
            sums[cell, k] += vals[j, k]
    return sums, counts


@njit(cache=True, inline="always")
def _box_sdf_one(px, py, pz, cx, cy, cz, hx, hy, hz):
    qx = abs(px - cx) - hx
    qy = abs(py - cy) - hy
    qz = abs(pz - cz) - hz
    ox = qx if qx > 0.0 else 0.0
    oy = qy if qy > 0.0 else 0.0
    oz = qz if qz > 0.0 else 0.0
    outside = np.sqrt(ox * ox + oy * oy + oz * oz)
    m = qx
    if qy > m:
        m = qy
    if qz > m:
        m = qz
    inside = m if m < 0.0 else 0.0
    return outside + inside


@njit(cache=True)
def _sdf_one(px, py, pz, kinds, params):
    best = np.inf
    for k in range(kinds.shape[0]):
        kind = kinds[k]
        if kind == PRIM_SPHERE:
            dx = px - params[k, 0]
            dy = py - params[k, 1]
            dz = pz - params[k, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - params[k, 3]
        elif kind == PRIM_BOX:
            d = _box_sdf_one(px, py, pz, params[k, 0], params[k, 1],
                             params[k, 2], params[k, 3], params[k, 4],
                             params[k, 5])
        else:
            t = params[k, 6]
            outer = _box_sdf_one(px, py, pz, params[k, 0], params[k, 1],
                                 params[k, 2], params[k, 3] + t,
                                 params[k, 4] + t, params[k, 5] + t)
            inner = _box_sdf_one(px, py, pz, params[k, 0], params[k, 1],
                                 params[k, 2], params[k, 3], params[k, 4],
                                 params[k, 5])
            d = max(outer, -inner)
        if d < best:
            best = d
    return best


@njit(cache=True)
def primitive_sdf(p, kinds, params):
    n = p.shape[0]
    out = np.empty(n)
    for j in range(n):
        out[j] = _sdf_one(p[j, 0], p[j, 1], p[j, 2], kinds, params)
    return out


@njit(cache=True)
def sphere_trace(origins, dirs, kinds, params, max_range, eps, max_steps):
    m = origins.shape[0]
    t = np.zeros(m)
    hit = np.zeros(m, np.bool_)
    for j in range(m):
        d0 = _sdf_one(origins[j, 0], origins[j, 1], origins[j, 2],
                      kinds, params)
        if d0 <= 0.0:
            return t, hit, True
    for j in range(m):
        tj = 0.0
        ok = False
        for _ in range(max_steps):
            px = origins[j, 0] + tj * dirs[j, 0]
            py = origins[j, 1] + tj * dirs[j, 1]
            pz = origins[j, 2] + tj * dirs[j, 2]
            d = _sdf_one(px, py, pz, kinds, params)
            if abs(d) < eps:
                ok = True
                break
            tj += d
            if tj > max_range:
                break
        if ok:
            t[j] = tj
            hit[j] = True
        else:
            t[j] = max_range
    return t, hit, False


@njit(cache=True)
def min_dists(a, b, chunk=1024):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        ax = a[i, 0]
        ay = a[i, 1]
        az = a[i, 2]
        for j in range(m):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            dz = az - b[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out
