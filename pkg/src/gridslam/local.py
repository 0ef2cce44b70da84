"""Per-submap estimation: feature initialization (closed-form and
learned), joint pose+feature optimization, and incremental
tracking/mapping.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import geometry, io, kernels
from .costs import (KIND_FREE_SPACE, KIND_NEAR_SURFACE, CostConfig, PointSet,
                    local_objective)
from .errors import (EmptyObservations, MissingEncoderWeights, ShapeMismatch,
                     TooFewPoints)
from .grid import (Decoder, GridLevel, MultiresGrid, eval_field, grid_mask,
                   load_grid, save_grid)
from .interp import trilinear_coords
from .optim import AdamState, adam_step, zero_grads
from .tape import Param, Tape

# Matrices at or below this many unknowns solve densely via pinv; larger
# closed-form systems go through LSMR on the sparse Jacobian.
DENSE_SOLVE_LIMIT = 1500

TRACK_VOXEL = 0.6
MAP_VOXEL = 0.08
MIN_TRACK_POINTS = 10
REORTH_EVERY = 100


@dataclass
class Frame:
    """One sensor frame: estimated pose (submap frame) plus its labeled
    points in the sensor frame."""

    pose_estimate: geometry.Pose
    points: PointSet
    index: int = 0
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class Submap:
    id: int
    base_pose: geometry.Pose
    frames: list
    box_lo: np.ndarray
    box_hi: np.ndarray
    grid: MultiresGrid | None = None
    decoder: Decoder | None = None

    @classmethod
    def from_shell(cls, shell: dict, submap_id: int = 0) -> "Submap":
        frames = [Frame(pose.copy(), points, index=i)
                  for i, (pose, points) in enumerate(shell["frames"])]
        return cls(submap_id, shell["base_pose"].copy(), frames,
                   np.asarray(shell["box_lo"], float),
                   np.asarray(shell["box_hi"], float))

    def attach_grid(self, cell_sizes, feature_dim: int,
                    pad: bool = True) -> MultiresGrid:
        self.grid = MultiresGrid.create(self.box_lo, self.box_hi, cell_sizes,
                                        feature_dim, pad=pad)
        return self.grid

    def points_in_submap_frame(self, frame_subset=None) -> PointSet:
        """All labeled points mapped through current pose estimates."""
        indices = range(len(self.frames)) if frame_subset is None \
            else frame_subset
        parts = []
        for k in indices:
            fr = self.frames[k]
            moved = PointSet(
                geometry.transform_point(fr.pose_estimate, fr.points.pos),
                fr.points.kind, fr.points.sdf, fr.points.weight,
                fr.points.bound_lo, fr.points.bound_hi)
            parts.append(moved)
        return PointSet.concat(parts)

    def copy(self) -> "Submap":
        return Submap(
            self.id, self.base_pose.copy(),
            [Frame(f.pose_estimate.copy(),
                   PointSet(f.points.pos.copy(), f.points.kind.copy(),
                            f.points.sdf.copy(), f.points.weight.copy(),
                            f.points.bound_lo.copy(),
                            f.points.bound_hi.copy()),
                   index=f.index, sensor_origin=f.sensor_origin.copy())
             for f in self.frames],
            self.box_lo.copy(), self.box_hi.copy(),
            self.grid.copy() if self.grid else None,
            self.decoder)


# ---- learned initialization ----

class Encoder:
    """Per-level network mapping a 3-channel residual voxel grid to the
    level's feature grid: two 3x3x3 conv layers (3 -> 6 -> 12, ReLU)
    then a shared per-vertex MLP (12 -> 16 -> d, ReLU hidden).
    """

    def __init__(self, arrays: dict):
        self.arrays = arrays

    @classmethod
    def random_init(cls, feature_dim: int, rng: np.random.Generator,
                    zero_last: bool = True) -> "Encoder":
        def he(shape, fan_in):
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

        w2 = np.zeros((16, feature_dim)) if zero_last \
            else he((16, feature_dim), 16)
        return cls({
            "conv1_w": he((6, 3, 3, 3, 3), 3 * 27), "conv1_b": np.zeros(6),
            "conv2_w": he((12, 6, 3, 3, 3), 6 * 27), "conv2_b": np.zeros(12),
            "mlp_w1": he((12, 16), 12), "mlp_b1": np.zeros(16),
            "mlp_w2": w2, "mlp_b2": np.zeros(feature_dim),
        })

    @property
    def feature_dim(self) -> int:
        return self.arrays["mlp_w2"].shape[1]

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def apply(self, voxels: np.ndarray) -> np.ndarray:
        """Forward pass: [3, nx, ny, nz] -> [nx, ny, nz, d]."""
        a = self.arrays
        h = np.maximum(kernels.conv3d(voxels, a["conv1_w"], a["conv1_b"]), 0.0)
        h = np.maximum(kernels.conv3d(h, a["conv2_w"], a["conv2_b"]), 0.0)
        rows = np.moveaxis(h, 0, -1).reshape(-1, h.shape[0])
        hidden = np.maximum(rows @ a["mlp_w1"] + a["mlp_b1"], 0.0)
        out = hidden @ a["mlp_w2"] + a["mlp_b2"]
        return out.reshape(voxels.shape[1:] + (self.feature_dim,))

    def apply_on_tape(self, t: Tape, voxels: np.ndarray, nodes: dict):
        """Taped forward returning a [V, d] node (C-order vertices)."""
        x = t.const(voxels)
        h = t.relu(t.conv3d(x, nodes["conv1_w"], nodes["conv1_b"]))
        h = t.relu(t.conv3d(h, nodes["conv2_w"], nodes["conv2_b"]))
        rows = t.reshape(t.moveaxis(h, 0, -1), (-1, 12))
        hidden = t.relu(t.linear(rows, nodes["mlp_w1"], nodes["mlp_b1"]))
        return t.linear(hidden, nodes["mlp_w2"], nodes["mlp_b2"])

    def copy(self) -> "Encoder":
        return Encoder({k: v.copy() for k, v in self.arrays.items()})


def save_encoders(path, encoders: list) -> None:
    arrays = {"n_levels": np.array([len(encoders)], np.int64)}
    for li, enc in enumerate(encoders):
        if enc is None:
            continue
        for k, v in enc.arrays.items():
            arrays[f"enc{li}_{k}"] = v
    io.write_container(path, arrays)


def load_encoders(path) -> list:
    arrays = io.read_container(path)
    n_levels = int(arrays["n_levels"][0])
    out = []
    for li in range(n_levels):
        prefix = f"enc{li}_"
        sub = {k[len(prefix):]: v.astype(float) for k, v in arrays.items()
               if k.startswith(prefix)}
        out.append(Encoder(sub) if sub else None)
    return out


# ---- residuals and voxelization ----

def residual_features(points: PointSet, grid: MultiresGrid, decoder: Decoder,
                      prior_levels: int) -> np.ndarray:
    """Per-point residual channels [n, 3] against the prior-level field.

    Positions must already be in the grid (submap) frame. Out-of-box
    points get zero residuals.
    """
    n = len(points)
    out = np.zeros((n, 3))
    if n == 0:
        return out
    mask = grid_mask(grid, points.pos)
    if not mask.any():
        return out
    h = np.zeros(n)
    h[mask] = eval_field(grid, decoder, points.pos[mask],
                         active_levels=prior_levels)
    near = (points.kind == KIND_NEAR_SURFACE) & mask
    free = (points.kind == KIND_FREE_SPACE) & mask
    out[near, 0] = h[near] - points.sdf[near]
    out[free, 1] = np.maximum(h[free] - points.bound_hi[free], 0.0)
    out[free, 2] = np.maximum(points.bound_lo[free] - h[free], 0.0)
    return out


def voxelize(pos: np.ndarray, r_in: np.ndarray,
             level: GridLevel) -> np.ndarray:
    """Mean residual per nearest lattice vertex: [3, nx, ny, nz].

    Vertices with no nearby points stay zero.
    """
    dims = np.asarray(level.dims, np.int64)
    if pos.shape[0] == 0:
        return np.zeros((r_in.shape[1] if r_in.ndim == 2 else 3,)
                        + tuple(dims))
    nearest = np.round((pos - level.origin) / level.cell_size).astype(np.int64)
    nearest = np.clip(nearest, 0, dims - 1)
    flat = (nearest[:, 0] * dims[1] + nearest[:, 1]) * dims[2] + nearest[:, 2]
    sums, counts = kernels.scatter_mean(flat, np.ascontiguousarray(r_in),
                                        int(np.prod(dims)))
    means = sums / np.maximum(counts, 1.0)[:, None]
    return np.moveaxis(means.reshape(tuple(dims) + (r_in.shape[1],)), -1, 0)


# ---- closed-form initialization ----

def closed_form_init(submap: Submap, decoder: Decoder, level_index: int,
                     dense_limit: int = DENSE_SOLVE_LIMIT,
                     damp: float = 0.0) -> np.ndarray:
    """Least-squares feature init for one level under a linear decoder.

    Minimizes the quadratic surrogate sum_j (h_j - y_j)^2 over the
    level's features with finer levels at zero, using the near-surface
    points at current pose estimates. Returns the level's feature array;
    vertices touched by no observation stay zero (min-norm solution).

    damp > 0 adds ridge regularization damp^2 * |F|^2, which tames the
    huge values the exact solution produces at barely-observed vertices;
    damp = 0 keeps the pure pseudoinverse solution.
    """
    if not decoder.linear:
        raise ShapeMismatch("closed_form_init requires a linear decoder")
    grid = submap.grid
    level = grid.levels[level_index]
    d = grid.feature_dim
    pts = submap.points_in_submap_frame()
    near = pts.kind == KIND_NEAR_SURFACE
    pts = pts.select(near)
    if len(pts) == 0:
        raise EmptyObservations("no near-surface points for closed-form init")
    mask = grid_mask(grid, pts.pos)
    pts = pts.select(mask)
    if len(pts) == 0:
        raise EmptyObservations("all near-surface points fall outside the box")

    h_prior = eval_field(grid, decoder, pts.pos, active_levels=level_index)
    r = h_prior - pts.sdf

    theta = decoder.level_weights(level_index, d)
    idx, w, _ = trilinear_coords(pts.pos, level.origin, level.cell_size,
                                 level.dims)
    n = len(pts)

    touched = np.unique(idx)
    col_of = np.full(level.n_vertices, -1, np.int64)
    col_of[touched] = np.arange(touched.size)
    m = touched.size * d

    rows = np.repeat(np.arange(n), 8 * d)
    cols = (col_of[idx][:, :, None] * d
            + np.arange(d)[None, None, :]).reshape(-1)
    vals = (w[:, :, None] * theta[None, None, :]).reshape(-1)

    if m <= dense_limit:
        jmat = np.zeros((n, m))
        np.add.at(jmat, (rows, cols), vals)
        jtj = jmat.T @ jmat
        jtr = jmat.T @ r
        if damp > 0.0:
            jtj[np.diag_indices_from(jtj)] += damp * damp
            sol = -np.linalg.solve(jtj, jtr)
        else:
            sol = -np.linalg.pinv(jtj, rcond=1e-10, hermitian=True) @ jtr
    else:
        jmat = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, m))
        result = scipy.sparse.linalg.lsmr(jmat, -r, damp=damp, atol=1e-10,
                                          btol=1e-10, maxiter=2000)
        sol = result[0]

    feats = np.zeros((level.n_vertices, d))
    feats[touched] = sol.reshape(touched.size, d)
    return feats.reshape(level.features.shape)


def encoder_init(submap: Submap, encoders: list,
                 level_index: int) -> np.ndarray:
    """Learned feature init for one level from measurement residuals."""
    if level_index >= len(encoders) or encoders[level_index] is None:
        raise MissingEncoderWeights(f"no encoder for level {level_index}")
    enc = encoders[level_index]
    grid = submap.grid
    pts = submap.points_in_submap_frame()
    r_in = residual_features(pts, grid, submap.decoder, level_index)
    voxels = voxelize(pts.pos, r_in, grid.levels[level_index])
    return enc.apply(voxels)


def hierarchical_init(submap: Submap, method: str = "closed_form",
                      encoders: list | None = None,
                      damp: float = 0.0) -> MultiresGrid:
    """Fill all levels coarse-to-fine; each level sees the ones below."""
    grid = submap.grid
    for li in range(grid.n_levels):
        if method == "closed_form":
            feats = closed_form_init(submap, submap.decoder, li, damp=damp)
        elif method == "encoder":
            feats = encoder_init(submap, encoders or [], li)
        elif method == "zero":
            feats = np.zeros_like(grid.levels[li].features)
        else:
            raise ShapeMismatch(f"unknown init method {method!r}")
        grid.levels[li].features = feats
    return grid


# ---- joint optimization ----

@dataclass
class LocalSlamConfig:
    epochs: int = 150
    lr_features: float = 1e-3
    lr_poses: float = 1e-3
    freeze_poses: bool = False
    sample_fraction: float | None = None
    seed: int = 0
    costs: CostConfig = field(default_factory=CostConfig)


def local_slam(submap: Submap, config: LocalSlamConfig):
    """Joint Adam refinement of features and frame poses.

    Returns (refined poses, loss trace rows, final skip count). Trace
    rows are (epoch, data_cost, reg_cost, skipped_points). Decoder
    weights stay fixed. The submap's grid features are updated in place.
    """
    grid = submap.grid
    n_frames = len(submap.frames)
    if n_frames == 0 or all(len(f.points) == 0 for f in submap.frames):
        raise EmptyObservations("submap has no observations")

    feat_params = [Param(l.features.reshape(-1, grid.feature_dim),
                         name=f"level{li}")
                   for li, l in enumerate(grid.levels)]
    states = [AdamState.for_param(p, lr=config.lr_features)
              for p in feat_params]
    eps_params = []
    if not config.freeze_poses:
        eps_params = [Param(np.zeros(6), name=f"eps{k}")
                      for k in range(n_frames)]
        states += [AdamState.for_param(p, lr=config.lr_poses)
                   for p in eps_params]
    params = feat_params + eps_params

    rng = np.random.default_rng(config.seed)
    sampled_frames = None
    if config.sample_fraction is not None:
        sampled_frames = _sample_frames(submap, config.sample_fraction, rng)

    trace = []
    skipped = 0
    for epoch in range(config.epochs):
        frames_view = submap.frames if sampled_frames is None \
            else sampled_frames(epoch)
        view = _FramesView(frames_view, grid, submap.decoder)
        t = Tape()
        feat_nodes = [t.param(p) for p in feat_params]
        eps_nodes = None if config.freeze_poses \
            else [t.param(p) for p in eps_params]
        total, data, reg, skipped = local_objective(
            t, view, eps_nodes, config.costs, feat_nodes=feat_nodes)
        zero_grads(params)
        t.backward(total)
        adam_step(params, states)
        trace.append((epoch, float(data.value),
                      0.0 if reg is None else float(reg.value), skipped))

    for li, level in enumerate(grid.levels):
        level.features = feat_params[li].value.reshape(level.features.shape)
    poses = []
    for k, frame in enumerate(submap.frames):
        if config.freeze_poses:
            poses.append(frame.pose_estimate.copy())
        else:
            pose = geometry.compose(frame.pose_estimate,
                                    geometry.se3_exp(eps_params[k].value))
            poses.append(geometry.re_orthonormalize(pose))
    return poses, trace, skipped


class _FramesView:
    """Submap stand-in with a substituted frame list (for sampling)."""

    def __init__(self, frames, grid, decoder):
        self.frames = frames
        self.grid = grid
        self.decoder = decoder


def _sample_frames(submap: Submap, fraction: float, rng: np.random.Generator):
    def sampler(_epoch: int):
        frames = []
        for fr in submap.frames:
            n = len(fr.points)
            k = max(1, int(round(fraction * n)))
            sel = rng.choice(n, size=min(k, n), replace=False)
            sel.sort()
            frames.append(Frame(fr.pose_estimate, fr.points.select(sel),
                                index=fr.index,
                                sensor_origin=fr.sensor_origin))
        return frames
    return sampler


# ---- incremental mode ----

def voxel_downsample(points: PointSet, voxel: float) -> PointSet:
    """One representative per occupied voxel: centroid position with the
    first contained point's labels."""
    if voxel <= 0.0:
        raise ShapeMismatch("voxel size must be positive")
    if len(points) == 0:
        return points
    cells = np.floor(points.pos / voxel).astype(np.int64)
    _, first_idx, inverse = np.unique(cells, axis=0, return_index=True,
                                      return_inverse=True)
    n_cells = first_idx.size
    sums = np.zeros((n_cells, 3))
    counts = np.zeros(n_cells)
    np.add.at(sums, inverse, points.pos)
    np.add.at(counts, inverse, 1.0)
    centroids = sums / counts[:, None]
    rep = points.select(first_idx)
    return PointSet(centroids, rep.kind, rep.sdf, rep.weight, rep.bound_lo,
                    rep.bound_hi)


def track_frame(submap: Submap, frame: Frame, iters: int = 30,
                lr: float = 1e-2, init_eps: np.ndarray | None = None,
                voxel: float = TRACK_VOXEL,
                costs: CostConfig | None = None) -> geometry.Pose:
    """Optimize one frame's pose against the fixed submap field.

    Uses Geman-McClure robustified SDF costs on the voxel-downsampled
    surface measurements (near-surface points with target 0); band
    samples are a mapping construct and would bias the pose. The pose
    regularizer is disabled.
    """
    costs = costs or CostConfig()
    near = frame.points.select((frame.points.kind == KIND_NEAR_SURFACE)
                               & (frame.points.sdf == 0.0))
    down = voxel_downsample(near, voxel)
    if len(down) < MIN_TRACK_POINTS:
        raise TooFewPoints(
            f"{len(down)} points after downsampling, need "
            f">= {MIN_TRACK_POINTS}")
    work = Frame(frame.pose_estimate.copy(), down, index=frame.index)
    view = _FramesView([work], submap.grid, submap.decoder)

    eps = Param(init_eps.copy() if init_eps is not None else np.zeros(6))
    state = AdamState.for_param(eps, lr=lr)
    for _ in range(iters):
        t = Tape()
        eps_node = t.param(eps)
        total, _, _, _ = local_objective(
            t, view, [eps_node], costs, pose_reg=False,
            robust_sigma=costs.gm_sigma)
        eps.zero_grad()
        t.backward(total)
        adam_step([eps], [state])
    pose = geometry.compose(work.pose_estimate, geometry.se3_exp(eps.value))
    return geometry.re_orthonormalize(pose)


def historical_frame_subset(n_frames: int) -> list:
    """Latest frame plus up to 10 evenly spaced historical indices."""
    if n_frames <= 0:
        return []
    if n_frames == 1:
        return [0]
    hist = np.unique(np.round(np.linspace(0, n_frames - 2, 10)).astype(int))
    return sorted(set(hist.tolist()) | {n_frames - 1})


def map_update(submap: Submap, iters: int = 10, lr: float = 1e-3,
               voxel: float = MAP_VOXEL,
               costs: CostConfig | None = None) -> list:
    """Feature-only Adam on the latest + evenly spaced historical frames.

    Returns the per-level feature arrays (also written into the grid).
    """
    costs = costs or CostConfig()
    subset = historical_frame_subset(len(submap.frames))
    frames = []
    for k in subset:
        fr = submap.frames[k]
        frames.append(Frame(fr.pose_estimate, voxel_downsample(fr.points,
                                                               voxel),
                            index=fr.index))
    view = _FramesView(frames, submap.grid, submap.decoder)

    grid = submap.grid
    feat_params = [Param(l.features.reshape(-1, grid.feature_dim))
                   for l in grid.levels]
    states = [AdamState.for_param(p, lr=lr) for p in feat_params]
    for _ in range(iters):
        t = Tape()
        feat_nodes = [t.param(p) for p in feat_params]
        total, _, _, _ = local_objective(t, view, None, costs,
                                         feat_nodes=feat_nodes)
        zero_grads(feat_params)
        t.backward(total)
        adam_step(feat_params, states)
    for li, level in enumerate(grid.levels):
        level.features = feat_params[li].value.reshape(level.features.shape)
    return [level.features for level in grid.levels]


# ---- submap directories ----

def save_submap(dirpath, submap: Submap, gt_poses: list | None = None) -> None:
    """Write a submap directory: meta.cfg, frames/*.ply, pose files,
    and grid.bin when a grid is attached."""
    import os

    os.makedirs(os.path.join(dirpath, "frames"), exist_ok=True)
    meta = io.Config()
    meta.set("id", submap.id)
    meta.set("n_frames", len(submap.frames))
    meta.set("box_lo", " ".join(f"{v:.17g}" for v in submap.box_lo))
    meta.set("box_hi", " ".join(f"{v:.17g}" for v in submap.box_hi))
    meta.set("base_pose", " ".join(
        f"{v:.17g}" for v in io.pose_to_row(submap.base_pose)))
    meta.save(os.path.join(dirpath, "meta.cfg"))
    for k, frame in enumerate(submap.frames):
        p = frame.points
        io.write_ply(os.path.join(dirpath, "frames", f"frame_{k:04d}.ply"),
                     p.pos, p.kind, p.sdf, p.weight, p.bound_lo, p.bound_hi)
    io.save_poses(os.path.join(dirpath, "poses_estimate.txt"),
                  [f.pose_estimate for f in submap.frames])
    if gt_poses is not None:
        io.save_poses(os.path.join(dirpath, "poses_gt.txt"), gt_poses)
    if submap.grid is not None:
        save_grid(os.path.join(dirpath, "grid.bin"), submap.grid,
                  submap.decoder)


def load_submap(dirpath, decoder: Decoder | None = None) -> Submap:
    import os

    meta = io.Config.load(os.path.join(dirpath, "meta.cfg"))
    n_frames = meta.get_int("n_frames")
    base_pose = io.pose_from_row(meta.get_vec("base_pose"))
    box_lo = meta.get_vec("box_lo")
    box_hi = meta.get_vec("box_hi")
    poses = io.load_poses(os.path.join(dirpath, "poses_estimate.txt"))
    frames = []
    for k in range(n_frames):
        pos, kind, sdf, weight, b_lo, b_hi = io.read_ply(
            os.path.join(dirpath, "frames", f"frame_{k:04d}.ply"))
        frames.append(Frame(poses[k], PointSet(pos, kind, sdf, weight,
                                               b_lo, b_hi), index=k))
    submap = Submap(meta.get_int("id", 0), base_pose, frames, box_lo, box_hi)
    grid_path = os.path.join(dirpath, "grid.bin")
    if os.path.exists(grid_path):
        submap.grid, saved_decoder = load_grid(grid_path)
        submap.decoder = decoder or saved_decoder
    else:
        submap.decoder = decoder
    return submap


def load_gt_poses(dirpath) -> list | None:
    import os

    path = os.path.join(dirpath, "poses_gt.txt")
    return io.load_poses(path) if os.path.exists(path) else None
