import os

import numpy as np
import pytest

from gridslam.errors import IoError, ShapeMismatch
from gridslam.grid import (Decoder, MultiresGrid, concat_features, eval_field,
                           grid_mask, interpolate, interpolation_row,
                           load_field, load_grid, save_field, save_grid)


def make_grid(rng, cell_sizes=(0.5, 0.25), d=3, pad=False):
    grid = MultiresGrid.create(np.zeros(3), np.ones(3), list(cell_sizes), d,
                               pad=pad)
    for lvl in grid.levels:
        lvl.features = rng.normal(size=lvl.features.shape)
    return grid


def test_create_dims_exact_subdivision():
    grid = MultiresGrid.create(np.zeros(3), np.array([2.0, 1.0, 1.0]),
                               [0.5, 0.1], 4, pad=False)
    assert grid.levels[0].dims == (5, 3, 3)
    assert grid.levels[1].dims == (21, 11, 11)
    assert np.isclose(grid.levels[1].cell_size, 0.1)
    lo0, hi0 = grid.levels[0].box()
    lo1, hi1 = grid.levels[1].box()
    assert np.allclose(lo0, lo1)
    assert np.allclose(hi0, hi1)


def test_create_pads_by_one_coarse_cell():
    grid = MultiresGrid.create(np.zeros(3), np.ones(3), [0.5], 2, pad=True)
    lo, hi = grid.box()
    assert np.allclose(lo, -0.5)
    assert np.all(hi >= 1.5 - 1e-12)


def test_create_rejects_nondecreasing_cells():
    with pytest.raises(ShapeMismatch):
        MultiresGrid.create(np.zeros(3), np.ones(3), [0.25, 0.5], 2)


def test_create_rejects_degenerate_box():
    with pytest.raises(ShapeMismatch):
        MultiresGrid.create(np.zeros(3), np.array([1.0, 0.0, 1.0]), [0.5], 2)


def test_non_dividing_cell_refined():
    # 0.3 does not divide 0.5; the level lands on the next exact divisor
    grid = MultiresGrid.create(np.zeros(3), np.ones(3), [0.5, 0.3], 2,
                               pad=False)
    assert np.isclose(grid.levels[1].cell_size, 0.25)


def test_interpolate_exact_at_vertices():
    rng = np.random.default_rng(0)
    grid = make_grid(rng)
    lvl = grid.levels[1]
    pos = lvl.vertex_positions()
    got = interpolate(lvl, pos)
    assert np.allclose(got, lvl.flat_features(), atol=1e-12)


def test_interpolation_row_reproduces_interpolate():
    rng = np.random.default_rng(1)
    grid = make_grid(rng)
    lvl = grid.levels[0]
    for x in rng.uniform(0.0, 1.0, size=(20, 3)):
        idx, w = interpolation_row(lvl, x)
        manual = (lvl.flat_features()[idx] * w[:, None]).sum(axis=0)
        assert np.allclose(manual, interpolate(lvl, x), atol=1e-12)
        assert np.isclose(w.sum(), 1.0)


def test_eval_field_concats_levels():
    rng = np.random.default_rng(2)
    grid = make_grid(rng, d=2)
    dec = Decoder.mlp(2, 2, hidden=8, rng=rng)
    x = rng.uniform(0.1, 0.9, size=(10, 3))
    want = dec.apply(np.concatenate(
        [interpolate(grid.levels[0], x), interpolate(grid.levels[1], x)],
        axis=1))
    assert np.allclose(eval_field(grid, dec, x), want, atol=1e-12)


def test_eval_field_inactive_levels_zero():
    rng = np.random.default_rng(3)
    grid = make_grid(rng, d=2)
    dec = Decoder.canonical_linear(2, 2)
    x = rng.uniform(0.1, 0.9, size=(5, 3))
    coarse_only = eval_field(grid, dec, x, active_levels=1)
    want = interpolate(grid.levels[0], x)[:, 0]
    assert np.allclose(coarse_only, want, atol=1e-12)
    feats = concat_features(grid, x, active_levels=1)
    assert np.all(feats[:, 2:] == 0.0)


def test_zero_features_give_decoder_bias():
    grid = MultiresGrid.create(np.zeros(3), np.ones(3), [0.5], 3, pad=False)
    dec = Decoder.linear_mode(np.arange(3, dtype=float), bias=-0.7)
    x = np.array([[0.3, 0.3, 0.3]])
    assert np.allclose(eval_field(grid, dec, x), -0.7)


def test_canonical_linear_reads_channel_zero():
    dec = Decoder.canonical_linear(2, 3)
    feats = np.array([[5.0, 1.0, 2.0, -3.0, 4.0, 9.0]])
    assert np.allclose(dec.apply(feats), 5.0 - 3.0)


def test_decoder_apply_shape_check():
    dec = Decoder.canonical_linear(2, 3)
    with pytest.raises(ShapeMismatch):
        dec.apply(np.ones((4, 5)))


def test_grid_mask_uses_shared_box():
    rng = np.random.default_rng(4)
    grid = make_grid(rng)
    pos = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
    assert grid_mask(grid, pos).tolist() == [True, False]


def test_grid_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    grid = make_grid(rng, d=4)
    dec = Decoder.mlp(2, 4, hidden=16, rng=rng)
    path = os.path.join(tmp_path, "grid.bin")
    save_grid(path, grid, dec)
    grid2, dec2 = load_grid(path)
    assert grid2.n_levels == grid.n_levels
    for a, b in zip(grid.levels, grid2.levels):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.origin, b.origin)
        assert a.cell_size == b.cell_size
        assert a.dims == b.dims
    assert dec2.linear == dec.linear
    for k in dec.arrays:
        assert np.array_equal(dec.arrays[k], dec2.arrays[k])


def test_load_grid_missing_file():
    with pytest.raises(IoError):
        load_grid("/nonexistent/grid.bin")


def test_field_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    dims = (4, 3, 2)
    values = rng.normal(size=dims)
    covered = rng.uniform(size=dims) < 0.8
    path = os.path.join(tmp_path, "field.bin")
    save_field(path, np.array([1.0, 2.0, 3.0]), 0.25, dims, values, covered)
    origin, cell, dims2, values2, covered2 = load_field(path)
    assert np.array_equal(origin, [1.0, 2.0, 3.0])
    assert cell == 0.25
    assert tuple(dims2) == dims
    assert np.array_equal(values, values2)
    assert np.array_equal(covered, covered2)
