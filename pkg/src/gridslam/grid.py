"""Multiresolution feature grids, the SDF decoder, and field evaluation.

A field value at x is the decoder applied to the concatenation of
per-level trilinearly interpolated features. All levels share one
bounding box; finer levels subdivide it. Cell sizes that do not divide
the coarse span evenly are shrunk to the nearest exact subdivision so
every level covers exactly the same region.
"""

from dataclasses import dataclass, field

import numpy as np

from . import io, kernels
from .errors import IoError, ShapeMismatch
from .interp import box_of, check_in_box, in_box_mask, trilinear_coords

FEATURE_INIT_STD = 1e-4


@dataclass
class GridLevel:
    """One regular lattice of learnable feature vectors."""

    origin: np.ndarray
    cell_size: float
    dims: tuple
    features: np.ndarray  # [nx, ny, nz, d]

    @property
    def n_vertices(self) -> int:
        return int(np.prod(self.dims))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[-1]

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(-1, self.feature_dim)

    def vertex_positions(self) -> np.ndarray:
        """All lattice vertex positions, [V, 3], C-order."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        rel = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(float)
        return self.origin + self.cell_size * rel

    def box(self):
        return box_of(self.origin, self.cell_size, self.dims)


@dataclass
class MultiresGrid:
    levels: list
    feature_dim: int

    @classmethod
    def create(cls, box_lo, box_hi, cell_sizes, feature_dim: int,
               pad: bool = True) -> "MultiresGrid":
        """Build an empty grid covering [box_lo, box_hi].

        The box is padded by one coarse cell on every side (disable with
        pad=False). cell_sizes must be strictly decreasing.
        """
        box_lo = np.asarray(box_lo, float)
        box_hi = np.asarray(box_hi, float)
        cell_sizes = [float(c) for c in cell_sizes]
        if any(b <= a for a, b in zip(box_lo, box_hi)):
            raise ShapeMismatch(f"degenerate box [{box_lo}, {box_hi}]")
        if any(c2 >= c1 for c1, c2 in zip(cell_sizes, cell_sizes[1:])):
            raise ShapeMismatch(
                f"cell sizes must decrease coarse to fine, got {cell_sizes}")
        coarse = cell_sizes[0]
        if pad:
            box_lo = box_lo - coarse
            box_hi = box_hi + coarse
        extent = box_hi - box_lo
        n_coarse = np.maximum(np.ceil(extent / coarse - 1e-9), 1).astype(int)
        levels = []
        prev_cell = None
        for cell in cell_sizes:
            # Exact integer subdivision of the coarse lattice keeps every
            # level covering the same box; a non-dividing request is
            # refined to the next exact divisor.
            m = max(int(np.ceil(coarse / cell - 1e-9)), 1)
            cell_actual = coarse / m
            if prev_cell is not None and cell_actual >= prev_cell - 1e-12:
                raise ShapeMismatch(
                    f"cell {cell} does not subdivide strictly finer than "
                    f"the previous level ({prev_cell})")
            prev_cell = cell_actual
            dims = tuple(int(n) * m + 1 for n in n_coarse)
            feats = np.zeros(dims + (feature_dim,))
            levels.append(GridLevel(box_lo.copy(), cell_actual, dims, feats))
        return cls(levels, feature_dim)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def box(self):
        return self.levels[0].box()

    def init_features_normal(self, rng: np.random.Generator,
                             std: float = FEATURE_INIT_STD) -> None:
        for level in self.levels:
            level.features = rng.normal(0.0, std, size=level.features.shape)

    def zero_features(self) -> None:
        for level in self.levels:
            level.features = np.zeros_like(level.features)

    def copy(self) -> "MultiresGrid":
        return MultiresGrid(
            [GridLevel(l.origin.copy(), l.cell_size, l.dims,
                       l.features.copy()) for l in self.levels],
            self.feature_dim)


class Decoder:
    """Maps concatenated per-level features to a scalar SDF.

    Two modes: a 2-layer MLP (input L*d -> hidden -> 1, ReLU) or a
    single affine map ("linear mode") used by the closed-form analysis.
    """

    def __init__(self, linear: bool, arrays: dict):
        self.linear = linear
        self.arrays = arrays

    @classmethod
    def mlp(cls, n_levels: int, feature_dim: int, hidden: int = 64,
            rng: np.random.Generator | None = None) -> "Decoder":
        rng = rng or np.random.default_rng(0)
        in_dim = n_levels * feature_dim
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, hidden))
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, 1))
        return cls(False, {
            "w1": w1, "b1": np.zeros(hidden),
            "w2": w2, "b2": np.zeros(1),
        })

    @classmethod
    def linear_mode(cls, weight: np.ndarray, bias: float = 0.0) -> "Decoder":
        return cls(True, {"w": np.asarray(weight, float),
                          "b": np.array([float(bias)])})

    @classmethod
    def canonical_linear(cls, n_levels: int, feature_dim: int) -> "Decoder":
        """Linear decoder reading feature channel 0 of every level."""
        w = np.zeros(n_levels * feature_dim)
        for l in range(n_levels):
            w[l * feature_dim] = 1.0
        return cls.linear_mode(w, 0.0)

    @property
    def in_dim(self) -> int:
        return (self.arrays["w"] if self.linear else self.arrays["w1"]).shape[0]

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def apply(self, feats: np.ndarray) -> np.ndarray:
        """Evaluate on [n, L*d] rows (or a single flat vector)."""
        single = feats.ndim == 1
        f = feats[None, :] if single else feats
        if f.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"decoder expects {self.in_dim} features, got {f.shape[1]}")
        if self.linear:
            out = f @ self.arrays["w"] + self.arrays["b"][0]
        else:
            h = np.maximum(f @ self.arrays["w1"] + self.arrays["b1"], 0.0)
            out = (h @ self.arrays["w2"] + self.arrays["b2"])[:, 0]
        return out[0] if single else out

    def level_weights(self, level: int, feature_dim: int) -> np.ndarray:
        """Linear-mode weights for one level's feature block."""
        if not self.linear:
            raise ShapeMismatch("level_weights requires a linear decoder")
        w = self.arrays["w"]
        return w[level * feature_dim:(level + 1) * feature_dim]

    def copy(self) -> "Decoder":
        return Decoder(self.linear, {k: v.copy() for k, v in self.arrays.items()})


def interpolate(level: GridLevel, x: np.ndarray) -> np.ndarray:
    """Trilinear feature at x ([3] -> [d], or [n, 3] -> [n, d])."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    check_in_box(pts, level.origin, level.cell_size, level.dims)
    idx, w, _ = trilinear_coords(pts, level.origin, level.cell_size,
                                 level.dims)
    out = kernels.gather_weighted(level.flat_features(), idx, w)
    return out[0] if single else out


def interpolation_row(level: GridLevel, x: np.ndarray):
    """Sparse interpolation row at x: (flat vertex indices, weights).

    Zero-weight corners are dropped, so vertex queries return a single
    entry of weight 1.
    """
    x = np.asarray(x, float)
    check_in_box(x[None, :], level.origin, level.cell_size, level.dims)
    idx, w, _ = trilinear_coords(x[None, :], level.origin, level.cell_size,
                                 level.dims)
    keep = w[0] != 0.0
    return idx[0][keep], w[0][keep]


def concat_features(grid: MultiresGrid, x: np.ndarray,
                    active_levels: int | None = None) -> np.ndarray:
    """Concatenated per-level features [n, L*d]; inactive levels are zero."""
    x = np.atleast_2d(np.asarray(x, float))
    active = grid.n_levels if active_levels is None else int(active_levels)
    parts = []
    for li, level in enumerate(grid.levels):
        if li < active:
            parts.append(interpolate(level, x))
        else:
            parts.append(np.zeros((x.shape[0], grid.feature_dim)))
    return np.concatenate(parts, axis=1)


def eval_field(grid: MultiresGrid, decoder: Decoder, x: np.ndarray,
               active_levels: int | None = None) -> np.ndarray:
    """Field value h(x) for a single point or an [n, 3] batch."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    feats = concat_features(grid, x, active_levels)
    out = decoder.apply(feats)
    return out[0] if single else out


def grid_mask(grid: MultiresGrid, x: np.ndarray) -> np.ndarray:
    """Boolean in-box mask against the shared level-0 box."""
    level = grid.levels[0]
    return in_box_mask(np.atleast_2d(x), level.origin, level.cell_size,
                       level.dims)


# ---- serialization ----

def save_grid(path, grid: MultiresGrid, decoder: Decoder | None = None) -> None:
    arrays = {
        "n_levels": np.array([grid.n_levels], np.int64),
        "feature_dim": np.array([grid.feature_dim], np.int64),
    }
    for i, level in enumerate(grid.levels):
        arrays[f"origin_{i}"] = level.origin
        arrays[f"cell_size_{i}"] = np.array([level.cell_size])
        arrays[f"dims_{i}"] = np.array(level.dims, np.int64)
        arrays[f"features_{i}"] = level.features
    if decoder is not None:
        arrays["decoder_linear"] = np.array([1 if decoder.linear else 0],
                                            np.int64)
        for k, v in decoder.arrays.items():
            arrays[f"decoder_{k}"] = v
    io.write_container(path, arrays)


def load_grid(path):
    """Load (MultiresGrid, Decoder-or-None) written by save_grid."""
    arrays = io.read_container(path)
    try:
        n_levels = int(arrays["n_levels"][0])
        feature_dim = int(arrays["feature_dim"][0])
        levels = []
        for i in range(n_levels):
            levels.append(GridLevel(
                arrays[f"origin_{i}"].astype(float),
                float(arrays[f"cell_size_{i}"][0]),
                tuple(int(v) for v in arrays[f"dims_{i}"]),
                arrays[f"features_{i}"].astype(float),
            ))
    except KeyError as exc:
        raise IoError(f"{path}: missing grid field {exc}") from exc
    grid = MultiresGrid(levels, feature_dim)
    decoder = None
    if "decoder_linear" in arrays:
        linear = bool(arrays["decoder_linear"][0])
        dec_arrays = {k[len("decoder_"):]: v.astype(float)
                      for k, v in arrays.items()
                      if k.startswith("decoder_") and k != "decoder_linear"}
        decoder = Decoder(linear, dec_arrays)
    return grid, decoder


def save_decoder(path, decoder: Decoder) -> None:
    arrays = {"decoder_linear": np.array([1 if decoder.linear else 0],
                                         np.int64)}
    for k, v in decoder.arrays.items():
        arrays[f"decoder_{k}"] = v
    io.write_container(path, arrays)


def load_decoder(path) -> Decoder:
    arrays = io.read_container(path)
    if "decoder_linear" not in arrays:
        raise IoError(f"{path}: not a decoder checkpoint")
    linear = bool(arrays["decoder_linear"][0])
    dec_arrays = {k[len("decoder_"):]: v.astype(float)
                  for k, v in arrays.items()
                  if k.startswith("decoder_") and k != "decoder_linear"}
    return Decoder(linear, dec_arrays)


def save_field(path, origin, cell_size: float, dims, values: np.ndarray,
               covered: np.ndarray) -> None:
    """Persist a scalar field sampled on a regular lattice."""
    io.write_container(path, {
        "origin": np.asarray(origin, float),
        "cell_size": np.array([float(cell_size)]),
        "dims": np.array(dims, np.int64),
        "values": np.asarray(values, float),
        "covered": np.asarray(covered).astype(np.uint8),
    })


def load_field(path):
    """(origin, cell_size, dims, values [nx,ny,nz], covered bool)."""
    arrays = io.read_container(path)
    try:
        origin = arrays["origin"].astype(float)
        cell_size = float(arrays["cell_size"][0])
        dims = tuple(int(v) for v in arrays["dims"])
        values = arrays["values"].astype(float)
        covered = arrays["covered"].astype(bool)
    except KeyError as exc:
        raise IoError(f"{path}: missing field entry {exc}") from exc
    return origin, cell_size, dims, values, covered
