"""Offline training: the shared field decoder (across several scenes)
and the per-level feature encoders used for learned initialization.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .costs import CostConfig, local_objective
from .errors import InsufficientScenes, ShapeMismatch
from .grid import Decoder
from .local import Encoder, Submap, encoder_init, residual_features, voxelize
from .optim import AdamState, adam_step, zero_grads
from .tape import Param, Tape

FEATURE_INIT_STD = 1e-4


@dataclass
class PretrainConfig:
    epochs: int = 1200
    fine_after: int = 200
    lr: float = 1e-3
    hidden: int = 64
    seed: int = 0
    costs: CostConfig = field(default_factory=CostConfig)


@dataclass
class EncoderTrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    rot_noise_deg: float = 1.0
    tran_noise_m: float = 0.01
    seed: int = 0
    zero_last: bool = True
    costs: CostConfig = field(default_factory=CostConfig)


def pretrain_decoder(submaps: list, config: PretrainConfig):
    """Train one shared MLP decoder over several scenes' submaps.

    Poses stay fixed at their stored estimates; each submap keeps its
    own trainable feature grids while the decoder weights are shared.
    Levels beyond the coarsest join the field only after
    config.fine_after epochs. Returns (decoder, per-epoch loss list).
    """
    if len(submaps) < 2:
        raise InsufficientScenes(
            f"decoder pretraining needs >= 2 scenes, got {len(submaps)}")
    for sm in submaps:
        if sm.grid is None:
            raise ShapeMismatch(f"submap {sm.id} has no grid attached")

    rng = np.random.default_rng(config.seed)
    grid0 = submaps[0].grid
    decoder = Decoder.mlp(grid0.n_levels, grid0.feature_dim,
                          hidden=config.hidden, rng=rng)
    for sm in submaps:
        sm.decoder = decoder
        sm.grid.init_features_normal(rng, std=FEATURE_INIT_STD)

    dec_params = {k: Param(v, name=f"dec_{k}")
                  for k, v in decoder.arrays.items()}
    feat_params = []
    for sm in submaps:
        feat_params.append([Param(l.features.reshape(-1, sm.grid.feature_dim))
                            for l in sm.grid.levels])
    params = list(dec_params.values()) + [p for group in feat_params
                                          for p in group]
    states = [AdamState.for_param(p, lr=config.lr) for p in params]

    trace = []
    for epoch in range(config.epochs):
        active = 1 if epoch < config.fine_after else None
        t = Tape()
        dec_nodes = {k: t.param(p) for k, p in dec_params.items()}
        totals = []
        for si, sm in enumerate(submaps):
            feat_nodes = [t.param(p) for p in feat_params[si]]
            total, _, _, _ = local_objective(
                t, sm, None, config.costs, feat_nodes=feat_nodes,
                decoder_nodes=dec_nodes, active_levels=active)
            totals.append(total)
        loss = t.add_n(totals)
        zero_grads(params)
        t.backward(loss)
        adam_step(params, states)
        trace.append(float(loss.value))

    for k, p in dec_params.items():
        decoder.arrays[k] = p.value
    for si, sm in enumerate(submaps):
        for li, level in enumerate(sm.grid.levels):
            level.features = feat_params[si][li].value.reshape(
                level.features.shape)
    return decoder, trace


def _perturbed_view(submap: Submap, rng: np.random.Generator,
                    rot_deg: float, tran_m: float) -> Submap:
    """Copy whose pose estimates carry fresh random error.

    The grid is copied too, so levels rewritten by prior encoders do
    not leak back into the source submap.
    """
    view = Submap(submap.id, submap.base_pose, [], submap.box_lo,
                  submap.box_hi, grid=submap.grid.copy(),
                  decoder=submap.decoder)
    for fr in submap.frames:
        noisy = geometry.perturb_pose(
            fr.pose_estimate, abs(rng.normal(0.0, rot_deg)),
            abs(rng.normal(0.0, tran_m)), rng)
        view.frames.append(type(fr)(noisy, fr.points, index=fr.index,
                                    sensor_origin=fr.sensor_origin))
    return view


def train_encoder(submaps: list, level: int, prior_encoders: list,
                  config: EncoderTrainConfig):
    """Train the level's encoder to absorb measurement residuals.

    Each epoch draws fresh pose noise per scene, fills levels below
    `level` with the frozen prior encoders, voxelizes the remaining
    residuals, and steps the encoder on the resulting map objective
    (data terms only, pose and decoder fixed).
    Returns (encoder, per-epoch loss list).
    """
    if len(submaps) == 0:
        raise InsufficientScenes("encoder training needs at least one scene")
    d = submaps[0].grid.feature_dim
    rng = np.random.default_rng(config.seed + 7 * level)
    enc = Encoder.random_init(d, rng, zero_last=config.zero_last)
    enc_params = {k: Param(v, name=f"enc_{k}") for k, v in enc.arrays.items()}
    params = list(enc_params.values())
    states = [AdamState.for_param(p, lr=config.lr) for p in params]

    trace = []
    for _ in range(config.epochs):
        t = Tape()
        enc_nodes = {k: t.param(p) for k, p in enc_params.items()}
        totals = []
        for sm in submaps:
            view = _perturbed_view(sm, rng, config.rot_noise_deg,
                                   config.tran_noise_m)
            for li in range(level):
                view.grid.levels[li].features = encoder_init(
                    view, prior_encoders, li)
            pts = view.points_in_submap_frame()
            r_in = residual_features(pts, view.grid, view.decoder, level)
            vox = voxelize(pts.pos, r_in, view.grid.levels[level])
            f_node = enc.apply_on_tape(t, vox, enc_nodes)
            feat_nodes = [None] * level + [f_node] \
                + [None] * (view.grid.n_levels - level - 1)
            total, _, _, _ = local_objective(
                t, view, None, config.costs, feat_nodes=feat_nodes,
                active_levels=level + 1)
            totals.append(total)
        loss = t.add_n(totals)
        zero_grads(params)
        t.backward(loss)
        adam_step(params, states)
        trace.append(float(loss.value))

    for k, p in enc_params.items():
        enc.arrays[k] = p.value
    return enc, trace


def train_encoders(submaps: list, config: EncoderTrainConfig) -> list:
    """Sequentially train one encoder per grid level (coarse first)."""
    n_levels = submaps[0].grid.n_levels
    encoders = []
    for li in range(n_levels):
        enc, _ = train_encoder(submaps, li, encoders, config)
        encoders.append(enc)
    return encoders
