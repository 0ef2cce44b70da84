import numpy as np
import pytest

from gridslam.errors import OutOfBounds
from gridslam.interp import (box_of, check_in_box, in_box_mask,
                             trilinear_coords)


def test_partition_of_unity():
    rng = np.random.default_rng(0)
    pos = rng.uniform(0.0, 1.5, size=(200, 3))
    idx, w, _ = trilinear_coords(pos, np.zeros(3), 0.5, (4, 4, 4))
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w >= -1e-15)
    assert idx.shape == (200, 8)


def test_vertex_query_hits_single_corner():
    origin = np.array([1.0, -2.0, 0.0])
    pos = origin + 0.25 * np.array([[2.0, 1.0, 3.0]])
    idx, w, _ = trilinear_coords(pos, origin, 0.25, (5, 5, 5))
    assert np.isclose(w.max(), 1.0)
    nz = w[0] != 0.0
    assert nz.sum() == 1
    # C-order flat index of vertex (2, 1, 3) on a 5x5x5 lattice
    assert idx[0][nz][0] == (2 * 5 + 1) * 5 + 3


def test_weight_gradient_matches_fd():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(64, 1))
    origin = np.zeros(3)
    dims = (4, 4, 4)
    pos = rng.uniform(0.1, 1.4, size=(20, 3))
    idx, w, dw = trilinear_coords(pos, origin, 0.5, dims)
    val = (feats[idx, 0] * w).sum(axis=1)
    h = 1e-6
    for axis in range(3):
        shift = np.zeros(3)
        shift[axis] = h
        iu, wu, _ = trilinear_coords(pos + shift, origin, 0.5, dims)
        id_, wd, _ = trilinear_coords(pos - shift, origin, 0.5, dims)
        up = (feats[iu, 0] * wu).sum(axis=1)
        dn = (feats[id_, 0] * wd).sum(axis=1)
        num = (up - dn) / (2 * h)
        ana = (feats[idx, 0] * dw[:, :, axis]).sum(axis=1)
        assert np.allclose(num, ana, atol=1e-6)


def test_in_box_mask_boundaries():
    origin = np.zeros(3)
    dims = (3, 3, 3)  # box [0, 1]^3 at cell 0.5
    pos = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
        [0.5, 0.5, 0.5],
        [1.0 + 1e-9, 0.5, 0.5],
        [-1e-9, 0.5, 0.5],
    ])
    mask = in_box_mask(pos, origin, 0.5, dims)
    assert mask.tolist() == [True, True, True, False, False]


def test_check_in_box_raises():
    with pytest.raises(OutOfBounds):
        check_in_box(np.array([[2.0, 0.0, 0.0]]), np.zeros(3), 0.5, (3, 3, 3))


def test_box_of():
    lo, hi = box_of(np.array([1.0, 2.0, 3.0]), 0.25, (5, 9, 3))
    assert np.allclose(lo, [1.0, 2.0, 3.0])
    assert np.allclose(hi, [2.0, 4.0, 3.5])


def test_clamped_queries_match_boundary_value():
    # gather contract: out-of-box queries clamp onto the boundary
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(27, 2))
    outside = np.array([[1.2, 0.5, 0.5]])
    edge = np.array([[1.0, 0.5, 0.5]])
    io_, wo, _ = trilinear_coords(outside, np.zeros(3), 0.5, (3, 3, 3))
    ie, we, _ = trilinear_coords(edge, np.zeros(3), 0.5, (3, 3, 3))
    vo = (feats[io_] * wo[:, :, None]).sum(axis=1)
    ve = (feats[ie] * we[:, :, None]).sum(axis=1)
    assert np.allclose(vo, ve, atol=1e-12)
