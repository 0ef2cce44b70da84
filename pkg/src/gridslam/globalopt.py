"""Cross-submap estimation: coarse-to-fine alignment of submap base
poses, fusion of overlapping fields, and joint global refinement
against the fused field.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .costs import (KIND_NEAR_SURFACE, CostConfig, PointSet, decode_on_tape,
                    point_costs_on_tape, trust_term_on_tape)
from .errors import EmptyGraph, ShapeMismatch, Uncovered
from .grid import concat_features, eval_field, grid_mask
from .optim import AdamState, adam_step, zero_grads
from .tape import Param, Tape

DIST_CHOICES = ("l2sq", "l1", "negcos")
DEFAULT_MAX_SAMPLES = 4096


@dataclass
class SubmapGraph:
    """Submaps with world base-pose estimates (stored on each submap)."""

    submaps: list

    def __len__(self) -> int:
        return len(self.submaps)

    def base_poses(self) -> list:
        return [sm.base_pose for sm in self.submaps]


@dataclass
class AlignSchedule:
    """Iteration counts per stage; a zero count disables that stage."""

    feature_iters: tuple = (45, 45)
    sdf_iters: int = 10
    lr: float = 1e-2
    dist: str = "l2sq"
    max_samples: int = DEFAULT_MAX_SAMPLES
    costs: CostConfig = field(default_factory=CostConfig)

    def __post_init__(self):
        if self.dist not in DIST_CHOICES:
            raise ShapeMismatch(f"dist must be one of {DIST_CHOICES}")
        if any(int(k) < 0 for k in self.feature_iters) or self.sdf_iters < 0:
            raise ShapeMismatch("iteration counts must be nonnegative")


def world_box(submap):
    """World-frame AABB of the submap's grid box (or raw bounds)."""
    if submap.grid is not None:
        lo, hi = submap.grid.box()
    else:
        lo, hi = submap.box_lo, submap.box_hi
    corners = np.array([[x, y, z]
                        for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    world = geometry.transform_point(submap.base_pose, corners)
    return world.min(axis=0), world.max(axis=0)


def build_edges(graph: SubmapGraph) -> list:
    """Unordered submap pairs whose world boxes overlap with positive
    volume."""
    boxes = [world_box(sm) for sm in graph.submaps]
    edges = []
    for u in range(len(graph.submaps)):
        for v in range(u + 1, len(graph.submaps)):
            lo_u, hi_u = boxes[u]
            lo_v, hi_v = boxes[v]
            if np.all(lo_u < hi_v) and np.all(lo_v < hi_u):
                edges.append((u, v))
    return edges


def overlap_vertices(graph: SubmapGraph, u: int, v: int,
                     level: int) -> np.ndarray:
    """Flat indices of u's level vertices that currently land in v's box."""
    sm_u, sm_v = graph.submaps[u], graph.submaps[v]
    pos = sm_u.grid.levels[level].vertex_positions()
    rel = geometry.compose(geometry.inverse(sm_v.base_pose), sm_u.base_pose)
    return np.nonzero(grid_mask(sm_v.grid,
                                geometry.transform_point(rel, pos)))[0]


@dataclass
class _Edge:
    """Frozen sample set for one directed comparison src -> dst."""

    src: int
    dst: int
    level: int
    pos_src: np.ndarray     # [m, 3] in the source submap frame
    feats_src: np.ndarray   # [m, (level+1)*d] cumulative source features
    h_src: np.ndarray       # [m] source field values (sdf stage)


def _subsample(arr_len: int, max_samples: int) -> np.ndarray:
    if arr_len <= max_samples:
        return np.arange(arr_len)
    return np.unique(np.linspace(0, arr_len - 1, max_samples).astype(int))


def _feature_edge(graph: SubmapGraph, src: int, dst: int, level: int,
                  max_samples: int):
    """Overlap vertices of src with their cumulative features frozen."""
    sm = graph.submaps[src]
    idx = overlap_vertices(graph, src, dst, level)
    if idx.size == 0:
        return None
    idx = idx[_subsample(idx.size, max_samples)]
    pos = sm.grid.levels[level].vertex_positions()[idx]
    feats = concat_features(sm.grid, pos, active_levels=level + 1)
    feats = feats[:, :(level + 1) * sm.grid.feature_dim]
    return _Edge(src, dst, level, pos, feats, np.zeros(pos.shape[0]))


def _sdf_edge(graph: SubmapGraph, src: int, dst: int, max_samples: int):
    """Near-surface points of src landing in both boxes, downsampled at
    the finest cell size, with their source field values frozen."""
    from .local import voxel_downsample

    sm_src, sm_dst = graph.submaps[src], graph.submaps[dst]
    pts = sm_src.points_in_submap_frame()
    pts = pts.select(pts.kind == KIND_NEAR_SURFACE)
    if len(pts) == 0:
        return None
    keep = grid_mask(sm_src.grid, pts.pos)
    rel = geometry.compose(geometry.inverse(sm_dst.base_pose),
                           sm_src.base_pose)
    keep &= grid_mask(sm_dst.grid, geometry.transform_point(rel, pts.pos))
    pts = pts.select(keep)
    if len(pts) == 0:
        return None
    pts = voxel_downsample(pts, sm_src.grid.levels[-1].cell_size)
    sel = _subsample(len(pts), max_samples)
    pos = pts.pos[sel]
    h = eval_field(sm_src.grid, sm_src.decoder, pos)
    return _Edge(src, dst, -1, pos, np.zeros((pos.shape[0], 0)), h)


def _freeze_stage_edges(graph: SubmapGraph, level: int, max_samples: int,
                        sdf_stage: bool = False) -> list:
    edges = []
    for u, v in build_edges(graph):
        for s, t in ((u, v), (v, u)):
            e = _sdf_edge(graph, s, t, max_samples) if sdf_stage \
                else _feature_edge(graph, s, t, level, max_samples)
            if e is not None:
                edges.append(e)
    return edges


def _feature_dist(t: Tape, a, b, kind: str):
    """Per-row distance [m] between [m, d] feature nodes."""
    if kind == "l2sq":
        return t.row_sum(t.square(t.sub(a, b)))
    if kind == "l1":
        return t.row_sum(t.abs(t.sub(a, b)))
    na = t.sqrt(t.add(t.row_sum(t.square(a)), t.const(1e-12)))
    nb = t.sqrt(t.add(t.row_sum(t.square(b)), t.const(1e-12)))
    return t.scale(t.div(t.row_sum(t.mul(a, b)), t.mul(na, nb)), -1.0)


def _mapped_positions(t: Tape, graph: SubmapGraph, edge: _Edge, eps_nodes):
    world = t.transform_points(eps_nodes[edge.src],
                               graph.submaps[edge.src].base_pose,
                               edge.pos_src)
    return t.inv_transform_points(eps_nodes[edge.dst],
                                  graph.submaps[edge.dst].base_pose, world)


def feature_align_cost(t: Tape, graph: SubmapGraph, edge: _Edge, eps_nodes,
                       dist: str = "l2sq"):
    """Summed cumulative-feature discrepancy for one directed edge.

    Compares the source's frozen levels 0..l concatenation against the
    target's, interpolated at the mapped positions. Target queries that
    fall outside the target box are skipped (zero contribution).
    Returns (cost node, skipped count).
    """
    dst = graph.submaps[edge.dst]
    local = _mapped_positions(t, graph, edge, eps_nodes)
    mask = grid_mask(dst.grid, local.value)

    parts = []
    for li in range(edge.level + 1):
        lvl = dst.grid.levels[li]
        parts.append(t.gather_trilinear(t.const(lvl.flat_features()), local,
                                        lvl.origin, lvl.cell_size, lvl.dims))
    tgt = t.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    per_row = _feature_dist(t, t.const(edge.feats_src), tgt, dist)
    cost = t.sum(t.mul(per_row, t.const(mask.astype(float))))
    return cost, int(len(mask) - mask.sum())


def sdf_align_cost(t: Tape, graph: SubmapGraph, edge: _Edge, eps_nodes):
    """Summed squared field discrepancy for one directed edge.

    Returns (cost node, skipped count)."""
    from .costs import field_on_tape

    dst = graph.submaps[edge.dst]
    local = _mapped_positions(t, graph, edge, eps_nodes)
    mask = grid_mask(dst.grid, local.value)
    h_dst = field_on_tape(t, dst.grid, dst.decoder, local)
    diff = t.square(t.sub(t.const(edge.h_src), h_dst))
    cost = t.sum(t.mul(diff, t.const(mask.astype(float))))
    return cost, int(len(mask) - mask.sum())


def align_submaps(graph: SubmapGraph, schedule: AlignSchedule,
                  gt_base_poses: list | None = None, gauge_fix: int = 0):
    """Coarse-to-fine refinement of submap base poses.

    Runs one stage per enabled grid level on cumulative-feature
    agreement, then a final stage on field agreement over near-surface
    points; every stage adds the trust-region pose term. Edge sample
    sets freeze at each stage start; base poses re-anchor at each stage
    end, warm-starting the next stage. The gauge_fix submap never
    moves. Returns (refined base poses, report rows): dicts with stage,
    iteration, objective, skipped count, and (with ground truth)
    per-submap pose errors.
    """
    n = len(graph.submaps)
    if n < 2:
        raise EmptyGraph(f"alignment needs >= 2 submaps, got {n}")
    if not build_edges(graph):
        raise EmptyGraph("no overlapping submap pairs")

    n_levels = graph.submaps[0].grid.n_levels
    stages = []
    for li, iters in enumerate(schedule.feature_iters):
        if li < n_levels and iters > 0:
            stages.append((f"feature_level{li}", li, int(iters), False))
    if schedule.sdf_iters > 0:
        stages.append(("sdf", n_levels - 1, int(schedule.sdf_iters), True))

    report = []
    for stage_name, level, iters, is_sdf in stages:
        edges = _freeze_stage_edges(graph, level, schedule.max_samples,
                                    sdf_stage=is_sdf)
        if not edges:
            continue
        eps_params = {u: Param(np.zeros(6), name=f"base_eps{u}")
                      for u in range(n) if u != gauge_fix}
        params = list(eps_params.values())
        states = [AdamState.for_param(p, lr=schedule.lr) for p in params]

        for it in range(iters):
            t = Tape()
            eps_nodes = {u: (t.param(eps_params[u]) if u in eps_params
                             else None) for u in range(n)}
            terms = []
            skipped = 0
            for e in edges:
                if is_sdf:
                    cost, n_skip = sdf_align_cost(t, graph, e, eps_nodes)
                else:
                    cost, n_skip = feature_align_cost(t, graph, e, eps_nodes,
                                                      schedule.dist)
                terms.append(cost)
                skipped += n_skip
            for u in eps_params:
                terms.append(trust_term_on_tape(t, eps_nodes[u],
                                                schedule.costs))
            total = t.add_n(terms)
            zero_grads(params)
            t.backward(total)
            adam_step(params, states)
            report.append(_report_row(graph, stage_name, it,
                                      float(total.value), skipped,
                                      gt_base_poses, eps_params))

        for u, p in eps_params.items():
            sm = graph.submaps[u]
            sm.base_pose = geometry.re_orthonormalize(
                geometry.compose(sm.base_pose, geometry.se3_exp(p.value)))

    return graph.base_poses(), report


def _report_row(graph, stage, iteration, objective, skipped, gt_base_poses,
                eps_params) -> dict:
    row = {"stage": stage, "iteration": iteration, "objective": objective,
           "skipped": skipped}
    if gt_base_poses is not None:
        for u, sm in enumerate(graph.submaps):
            pose = sm.base_pose
            if u in eps_params:
                pose = geometry.compose(pose,
                                        geometry.se3_exp(eps_params[u].value))
            rot, tran = geometry.pose_error(gt_base_poses[u], pose)
            row[f"rot_err_deg_{u}"] = rot
            row[f"tran_err_m_{u}"] = tran
    return row


# ---- fusion ----

def fuse_query(graph: SubmapGraph, pos_world: np.ndarray):
    """Fused field values at world positions.

    Features of every submap covering a position are averaged (binary
    box weights) per level and pushed through the shared decoder.
    Returns (values [n], covered mask [n]); raises Uncovered when no
    position is covered at all.
    """
    pos_world = np.atleast_2d(np.asarray(pos_world, float))
    n = pos_world.shape[0]
    if len(graph.submaps) == 0:
        raise EmptyGraph("no submaps to fuse")
    decoder = graph.submaps[0].decoder
    in_dim = graph.submaps[0].grid.n_levels * graph.submaps[0].grid.feature_dim

    sums = np.zeros((n, in_dim))
    counts = np.zeros(n)
    for sm in graph.submaps:
        local = geometry.transform_point(geometry.inverse(sm.base_pose),
                                         pos_world)
        mask = grid_mask(sm.grid, local)
        if not mask.any():
            continue
        sums[mask] += concat_features(sm.grid, local[mask])
        counts[mask] += 1.0
    covered = counts > 0.0
    if not covered.any():
        raise Uncovered("no query position is covered by any submap")
    values = np.zeros(n)
    values[covered] = decoder.apply(sums[covered] / counts[covered, None])
    return values, covered


# ---- joint refinement against the fused field ----

def global_ba_objective(t: Tape, graph: SubmapGraph, frame_eps, base_eps,
                        feat_nodes, costs: CostConfig):
    """Data cost of all observations against the fused field, on tape.

    frame_eps[u][k] and base_eps[u] are twist Nodes (None = fixed);
    feat_nodes[u][li] are [V, d] Nodes (None = constant features).
    Points not covered by any submap at the current poses are skipped.
    Returns (cost node, skipped count).
    """
    decoder = graph.submaps[0].decoder
    worlds, sets = [], []
    for u, sm in enumerate(graph.submaps):
        for k, fr in enumerate(sm.frames):
            if len(fr.points) == 0:
                continue
            local = t.transform_points(frame_eps[u][k], fr.pose_estimate,
                                       fr.points.pos)
            worlds.append(t.transform_points(base_eps[u], sm.base_pose,
                                             local))
            sets.append(fr.points)
    if not worlds:
        raise EmptyGraph("no observations in the graph")
    world = t.concat(worlds, axis=0) if len(worlds) > 1 else worlds[0]
    points = PointSet.concat(sets)
    n = len(points)

    counts = np.zeros(n)
    level_sums = [None] * graph.submaps[0].grid.n_levels
    for v, sm in enumerate(graph.submaps):
        local_v = t.inv_transform_points(base_eps[v], sm.base_pose, world)
        mask_v = grid_mask(sm.grid, local_v.value)
        counts += mask_v
        col = t.const(mask_v.astype(float)[:, None])
        for li, lvl in enumerate(sm.grid.levels):
            feats_v = feat_nodes[v][li] if feat_nodes[v][li] is not None \
                else t.const(lvl.flat_features())
            g = t.mul(t.gather_trilinear(feats_v, local_v, lvl.origin,
                                         lvl.cell_size, lvl.dims), col)
            level_sums[li] = g if level_sums[li] is None \
                else t.add(level_sums[li], g)

    covered = counts > 0.0
    inv = t.const(1.0 / np.maximum(counts, 1.0)[:, None])
    fused = [t.mul(s, inv) for s in level_sums]
    feats = t.concat(fused, axis=1) if len(fused) > 1 else fused[0]
    h = decode_on_tape(t, feats, decoder)
    per_point = point_costs_on_tape(t, h, points, costs,
                                    covered.astype(float))
    return t.sum(per_point), int(n - covered.sum())


def global_ba(graph: SubmapGraph, iters: int = 50, lr: float = 1e-3,
              costs: CostConfig | None = None, gauge_fix: int = 0):
    """Joint Adam over all features, base poses, and frame poses.

    Minimizes every observation's data cost against the fused field;
    the gauge_fix submap's base pose stays fixed. Returns (refined base
    poses, per-iteration (loss, skipped) list); features and frame
    poses are written back into the graph's submaps.
    """
    n = len(graph.submaps)
    if n < 2:
        raise EmptyGraph(f"global refinement needs >= 2 submaps, got {n}")
    costs = costs or CostConfig()

    feat_params = [[Param(l.features.reshape(-1, sm.grid.feature_dim))
                    for l in sm.grid.levels] for sm in graph.submaps]
    frame_params = [[Param(np.zeros(6)) for _ in sm.frames]
                    for sm in graph.submaps]
    base_params = {u: Param(np.zeros(6)) for u in range(n) if u != gauge_fix}

    params = [p for group in feat_params for p in group] \
        + [p for group in frame_params for p in group] \
        + list(base_params.values())
    states = [AdamState.for_param(p, lr=lr) for p in params]

    trace = []
    for _ in range(int(iters)):
        t = Tape()
        feat_nodes = [[t.param(p) for p in group] for group in feat_params]
        frame_nodes = [[t.param(p) for p in group] for group in frame_params]
        base_nodes = {u: (t.param(base_params[u]) if u in base_params
                          else None) for u in range(n)}
        loss, skipped = global_ba_objective(t, graph, frame_nodes,
                                            base_nodes, feat_nodes, costs)
        zero_grads(params)
        t.backward(loss)
        adam_step(params, states)
        trace.append((float(loss.value), skipped))

    for si, sm in enumerate(graph.submaps):
        for li, level in enumerate(sm.grid.levels):
            level.features = feat_params[si][li].value.reshape(
                level.features.shape)
        for k, fr in enumerate(sm.frames):
            fr.pose_estimate = geometry.re_orthonormalize(geometry.compose(
                fr.pose_estimate, geometry.se3_exp(frame_params[si][k].value)))
        if si in base_params:
            sm.base_pose = geometry.re_orthonormalize(geometry.compose(
                sm.base_pose, geometry.se3_exp(base_params[si].value)))
    return graph.base_poses(), trace
