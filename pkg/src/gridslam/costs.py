"""Cost terms for local map fitting and their tape builders.

Observed points carry one of two label kinds: near-surface points with
a signed-distance target, or free-space points with lower/upper SDF
bounds. ``PointSet`` is the struct-of-arrays batch form used on hot
paths; ``LabeledPoint`` is the per-point record form for construction
and small tests.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import EmptyObservations, ShapeMismatch
from .grid import Decoder, MultiresGrid, grid_mask
from .tape import Node, Tape

KIND_NEAR_SURFACE = 0
KIND_FREE_SPACE = 1

DEFAULT_NEAR_BAND = 0.3
DEFAULT_GM_SIGMA = 0.1


@dataclass
class LabeledPoint:
    """One observation in the sensor frame.

    kind 0 (near-surface): sdf is the signed-distance target, weight a
    per-point multiplier on the sdf cost. kind 1 (free-space): bound_lo
    and bound_hi bracket the true SDF.
    """

    x: np.ndarray
    kind: int
    sdf: float = 0.0
    weight: float = 1.0
    bound_lo: float = 0.0
    bound_hi: float = 0.0


class PointSet:
    """Batch of labeled points (struct of arrays)."""

    __slots__ = ("pos", "kind", "sdf", "weight", "bound_lo", "bound_hi")

    def __init__(self, pos, kind, sdf, weight, bound_lo, bound_hi):
        self.pos = np.asarray(pos, float).reshape(-1, 3)
        n = self.pos.shape[0]
        self.kind = np.asarray(kind, np.uint8).reshape(n)
        self.sdf = np.asarray(sdf, float).reshape(n)
        self.weight = np.asarray(weight, float).reshape(n)
        self.bound_lo = np.asarray(bound_lo, float).reshape(n)
        self.bound_hi = np.asarray(bound_hi, float).reshape(n)

    def __len__(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def empty(cls) -> "PointSet":
        z = np.zeros(0)
        return cls(np.zeros((0, 3)), z, z, z, z, z)

    @classmethod
    def from_points(cls, points) -> "PointSet":
        pos = np.array([p.x for p in points], float).reshape(-1, 3)
        return cls(
            pos,
            np.array([p.kind for p in points], np.uint8),
            np.array([p.sdf for p in points]),
            np.array([p.weight for p in points]),
            np.array([p.bound_lo for p in points]),
            np.array([p.bound_hi for p in points]),
        )

    def to_points(self) -> list:
        return [LabeledPoint(self.pos[i].copy(), int(self.kind[i]),
                             float(self.sdf[i]), float(self.weight[i]),
                             float(self.bound_lo[i]), float(self.bound_hi[i]))
                for i in range(len(self))]

    @classmethod
    def concat(cls, sets) -> "PointSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets])
                     for f in ("pos", "kind", "sdf", "weight",
                               "bound_lo", "bound_hi")))

    def select(self, mask_or_idx) -> "PointSet":
        return PointSet(self.pos[mask_or_idx], self.kind[mask_or_idx],
                        self.sdf[mask_or_idx], self.weight[mask_or_idx],
                        self.bound_lo[mask_or_idx],
                        self.bound_hi[mask_or_idx])

    def validate(self, near_band: float = DEFAULT_NEAR_BAND) -> None:
        near = self.kind == KIND_NEAR_SURFACE
        if np.any(np.abs(self.sdf[near]) > near_band + 1e-9):
            raise ShapeMismatch("near-surface target outside the band")
        free = self.kind == KIND_FREE_SPACE
        if np.any(self.bound_lo[free] > self.bound_hi[free] + 1e-12):
            raise ShapeMismatch("free-space bounds out of order")


@dataclass
class CostConfig:
    """Weights of the map-fitting objective."""

    w_sdf: float = 5.4
    beta: float = 5.0
    near_surface_band: float = DEFAULT_NEAR_BAND
    w_rho: float = 1e3
    tau: float = 0.3
    gm_sigma: float = DEFAULT_GM_SIGMA

    @classmethod
    def from_config(cls, cfg) -> "CostConfig":
        base = cls()
        return cls(
            w_sdf=cfg.get_float("w_sdf", base.w_sdf),
            beta=cfg.get_float("beta", base.beta),
            near_surface_band=cfg.get_float("near_surface_band",
                                            base.near_surface_band),
            w_rho=cfg.get_float("w_rho", base.w_rho),
            tau=cfg.get_float("tau", base.tau),
            gm_sigma=cfg.get_float("gm_sigma", base.gm_sigma),
        )


# ---- scalar reference forms ----

def sdf_cost(h: float, y: float, w: float) -> float:
    return w * abs(h - y)


def bound_cost(h: float, b_lo: float, b_hi: float, beta: float) -> float:
    below = max(np.exp(beta * (b_lo - h)) - 1.0, 0.0)
    above = max(h - b_hi, 0.0)
    return max(below, above)


def trust_region(t_hat: geometry.Pose, t: geometry.Pose, w_rho: float,
                 tau: float) -> float:
    eps = geometry.se3_log(geometry.compose(geometry.inverse(t_hat), t))
    return w_rho * max(float(np.linalg.norm(eps)) - tau, 0.0)


def gm_kernel(residual: float, sigma: float) -> float:
    r2 = residual * residual
    return r2 / (1.0 + r2 / (sigma * sigma))


# ---- tape builders ----

def decode_on_tape(t: Tape, feats: Node, decoder, decoder_nodes=None) -> Node:
    """Field values [n] from concatenated features [n, L*d] on tape.

    decoder_nodes overrides decoder.arrays with tape Nodes (used when
    decoder weights are trainable); otherwise weights enter as consts.
    """
    nodes = decoder_nodes or {k: t.const(v) for k, v in decoder.arrays.items()}
    if decoder.linear:
        in_dim = decoder.in_dim
        w = t.reshape(nodes["w"], (in_dim, 1))
        out = t.add(t.matmul(feats, w), nodes["b"])
    else:
        hidden = t.relu(t.linear(feats, nodes["w1"], nodes["b1"]))
        out = t.add(t.matmul(hidden, nodes["w2"]), nodes["b2"])
    return t.reshape(out, (-1,))


def gather_features_on_tape(t: Tape, grid: MultiresGrid, feat_nodes,
                            pos, active_levels=None) -> Node:
    """Concatenated per-level features [n, L*d] on tape.

    feat_nodes: per-level Nodes with [V, d] values (or None to use the
    grid's stored features as constants). Levels above active_levels
    contribute zero constants.
    """
    n = pos.value.shape[0] if isinstance(pos, Node) else np.asarray(pos).shape[0]
    active = grid.n_levels if active_levels is None else int(active_levels)
    parts = []
    for li, level in enumerate(grid.levels):
        if li < active:
            fnode = feat_nodes[li] if feat_nodes and feat_nodes[li] is not None \
                else t.const(level.flat_features())
            parts.append(t.gather_trilinear(fnode, pos, level.origin,
                                            level.cell_size, level.dims))
        else:
            parts.append(t.const(np.zeros((n, grid.feature_dim))))
    return t.concat(parts, axis=1)


def field_on_tape(t: Tape, grid: MultiresGrid, decoder: Decoder, pos,
                  feat_nodes=None, decoder_nodes=None,
                  active_levels=None) -> Node:
    feats = gather_features_on_tape(t, grid, feat_nodes, pos, active_levels)
    return decode_on_tape(t, feats, decoder, decoder_nodes)


def point_costs_on_tape(t: Tape, h: Node, points: PointSet,
                        config: CostConfig, mask: np.ndarray,
                        robust_sigma: float | None = None) -> Node:
    """Per-point data costs [n] with out-of-box rows masked to zero.

    Near-surface points get w_sdf-weighted |h - y| (or its Geman-McClure
    robustification when robust_sigma is set); free-space points get the
    exp/linear bound hinge.
    """
    near = (points.kind == KIND_NEAR_SURFACE).astype(float) * mask
    free = (points.kind == KIND_FREE_SPACE).astype(float) * mask

    r = t.sub(h, t.const(points.sdf))
    if robust_sigma is None:
        near_cost = t.abs(r)
    else:
        sq = t.square(r)
        denom = t.add(t.scale(sq, 1.0 / (robust_sigma * robust_sigma)),
                      t.const(1.0))
        near_cost = t.div(sq, denom)
    near_term = t.mul(near_cost, t.const(config.w_sdf * points.weight * near))

    expo = t.exp(t.scale(t.sub(t.const(points.bound_lo), h), config.beta))
    below = t.max_const(t.sub(expo, t.const(1.0)), 0.0)
    above = t.max_const(t.sub(h, t.const(points.bound_hi)), 0.0)
    bound = t.maximum(below, above)
    free_term = t.mul(bound, t.const(free))

    return t.add(near_term, free_term)


def trust_term_on_tape(t: Tape, eps_node: Node, config: CostConfig) -> Node:
    excess = t.sub(t.l2norm(eps_node), t.const(config.tau))
    return t.scale(t.relu(excess), config.w_rho)


def local_objective(t: Tape, submap, eps_nodes, config: CostConfig,
                    feat_nodes=None, decoder_nodes=None, active_levels=None,
                    pose_reg: bool = True, robust_sigma: float | None = None,
                    frame_subset=None):
    """Map-fitting objective of one submap on tape.

    Args:
        submap: local.Submap (grid + decoder + frames).
        eps_nodes: per-frame twist Nodes, or None entries for fixed poses.
        feat_nodes: per-level [V, d] Nodes (None entries -> constant).
        frame_subset: indices of frames to include (default all).

    Returns:
        (total Node, data Node, reg Node or None, n_skipped out-of-box).
    """
    indices = list(range(len(submap.frames))) if frame_subset is None \
        else list(frame_subset)
    if not indices or all(len(submap.frames[k].points) == 0 for k in indices):
        raise EmptyObservations("no observed points in selected frames")

    transformed = []
    sets = []
    for k in indices:
        frame = submap.frames[k]
        if len(frame.points) == 0:
            continue
        eps_k = eps_nodes[k] if eps_nodes is not None else None
        transformed.append(t.transform_points(eps_k, frame.pose_estimate,
                                              frame.points.pos))
        sets.append(frame.points)
    pos = t.concat(transformed, axis=0) if len(transformed) > 1 \
        else transformed[0]
    points = PointSet.concat(sets)

    mask = grid_mask(submap.grid, pos.value).astype(float)
    n_skipped = int(len(points) - mask.sum())

    h = field_on_tape(t, submap.grid, submap.decoder, pos,
                      feat_nodes=feat_nodes, decoder_nodes=decoder_nodes,
                      active_levels=active_levels)
    per_point = point_costs_on_tape(t, h, points, config, mask,
                                    robust_sigma=robust_sigma)
    data = t.sum(per_point)

    reg = None
    if pose_reg and eps_nodes is not None:
        terms = [trust_term_on_tape(t, eps_nodes[k], config)
                 for k in indices if eps_nodes[k] is not None]
        if terms:
            reg = t.add_n(terms)
    total = data if reg is None else t.add(data, reg)
    return total, data, reg, n_skipped
