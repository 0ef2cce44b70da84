"""Synthetic scenes with analytic SDFs and a simulated depth sensor.

Scenes are min-unions of spheres, boxes, and hollow rooms (a box shell
with a cavity). The min-union SDF is exact outside all primitives and
inside the hollow-room cavity, and a valid upper bound inside overlaps,
which makes it usable as a ground-truth oracle for field evaluation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry, kernels
from .costs import KIND_FREE_SPACE, KIND_NEAR_SURFACE, PointSet
from .errors import IoError, SensorInsideSurface, ShapeMismatch
from .io import Config

SURFACE_EPS = 1e-4
MAX_TRACE_STEPS = 512


@dataclass
class Sphere:
    center: np.ndarray
    radius: float


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray


@dataclass
class HollowRoom:
    """Axis-aligned box shell: cavity half_extents plus wall thickness."""

    center: np.ndarray
    half_extents: np.ndarray
    thickness: float


@dataclass
class Scene:
    primitives: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    def to_arrays(self):
        kinds = np.empty(len(self.primitives), np.int64)
        params = np.zeros((len(self.primitives), 7))
        for i, prim in enumerate(self.primitives):
            if isinstance(prim, Sphere):
                kinds[i] = kernels.PRIM_SPHERE
                params[i, :3] = prim.center
                params[i, 3] = prim.radius
            elif isinstance(prim, Box):
                kinds[i] = kernels.PRIM_BOX
                params[i, :3] = prim.center
                params[i, 3:6] = prim.half_extents
            elif isinstance(prim, HollowRoom):
                kinds[i] = kernels.PRIM_HOLLOW_ROOM
                params[i, :3] = prim.center
                params[i, 3:6] = prim.half_extents
                params[i, 6] = prim.thickness
            else:
                raise ShapeMismatch(f"unknown primitive {type(prim)}")
        return kinds, params


@dataclass
class SensorModel:
    """Pinhole camera or spherical scanner emitting one ray per sample."""

    kind: str = "spherical"
    # pinhole
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 32.0
    cy: float = 24.0
    width: int = 64
    height: int = 48
    # spherical
    n_azimuth: int = 40
    n_elevation: int = 12
    elevation_lo: float = -1.0
    elevation_hi: float = 1.0
    max_range: float = 12.0
    noise_sigma: float = 0.0

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, [m, 3]."""
        if self.kind == "pinhole":
            if self.fx <= 0 or self.fy <= 0 or self.width <= 0 \
                    or self.height <= 0:
                raise ShapeMismatch("pinhole intrinsics must be positive")
            u, v = np.meshgrid(np.arange(self.width), np.arange(self.height),
                               indexing="xy")
            d = np.stack([(u.ravel() + 0.5 - self.cx) / self.fx,
                          (v.ravel() + 0.5 - self.cy) / self.fy,
                          np.ones(u.size)], axis=1)
        elif self.kind == "spherical":
            if self.n_azimuth <= 0 or self.n_elevation <= 0:
                raise ShapeMismatch("scan pattern counts must be positive")
            az = np.linspace(-np.pi, np.pi, self.n_azimuth, endpoint=False)
            el = np.linspace(self.elevation_lo, self.elevation_hi,
                             self.n_elevation)
            azg, elg = np.meshgrid(az, el, indexing="ij")
            d = np.stack([np.cos(elg) * np.cos(azg),
                          np.cos(elg) * np.sin(azg),
                          np.sin(elg)], axis=-1).reshape(-1, 3)
        else:
            raise ShapeMismatch(f"unknown sensor kind {self.kind!r}")
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def scene_sdf(scene: Scene, x: np.ndarray) -> np.ndarray:
    """Ground-truth signed distance ([3] -> scalar, [n, 3] -> [n])."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    kinds, params = scene.to_arrays()
    out = kernels.primitive_sdf(np.atleast_2d(x), kinds, params)
    return float(out[0]) if single else out


def render_depth(scene: Scene, pose: geometry.Pose, sensor: SensorModel,
                 rng: np.random.Generator | None = None):
    """Sphere-trace one frame.

    Returns (depths [m], hit [m] bool, dirs_sensor [m, 3]). Depths carry
    optional Gaussian noise along the ray; missed rays read max_range.
    """
    dirs_sensor = sensor.ray_directions()
    dirs_world = dirs_sensor @ pose.rotation.T
    origins = np.broadcast_to(pose.translation,
                              dirs_world.shape).astype(float).copy()
    kinds, params = scene.to_arrays()
    depths, hit, inside = kernels.sphere_trace(
        origins, dirs_world, kinds, params, sensor.max_range, SURFACE_EPS,
        MAX_TRACE_STEPS)
    if inside:
        raise SensorInsideSurface(
            f"sensor origin {pose.translation} has sdf <= 0")
    depths = depths.copy()
    if sensor.noise_sigma > 0.0 and rng is not None:
        depths[hit] += rng.normal(0.0, sensor.noise_sigma,
                                  size=int(hit.sum()))
    return depths, hit, dirs_sensor


def label_points(scene: Scene, pose: geometry.Pose, depths: np.ndarray,
                 hit: np.ndarray, dirs_sensor: np.ndarray,
                 rng: np.random.Generator, mode: str = "isdf-like",
                 n_near: int = 2, n_free: int = 3,
                 near_band: float = 0.3) -> PointSet:
    """Sample labeled points along the hit rays, in the sensor frame.

    Per hit ray of measured depth D:
      * the hit point itself, near-surface with target 0;
      * n_near samples at D + delta, delta uniform in [-band, band],
        near-surface with target -delta ("isdf-like") or the exact
        scene SDF ("oracle"); behind-surface samples are kept only while
        still inside the scene bounds, oracle labels only within the band;
      * n_free samples at t uniform in [0.2 D, D - band], free-space
        with bounds [0, D - t] (skipped when the range is empty).

    Missed rays produce no labels.
    """
    if mode not in ("isdf-like", "oracle"):
        raise ShapeMismatch(f"unknown labeling mode {mode!r}")
    d_hit = depths[hit]
    dirs = dirs_sensor[hit]
    n_hits = d_hit.shape[0]
    parts = []

    surf = PointSet(dirs * d_hit[:, None],
                    np.full(n_hits, KIND_NEAR_SURFACE),
                    np.zeros(n_hits), np.ones(n_hits),
                    np.zeros(n_hits), np.zeros(n_hits))
    parts.append(surf)

    if n_near > 0 and n_hits > 0:
        delta = rng.uniform(-near_band, near_band, size=(n_hits, n_near))
        depth_s = d_hit[:, None] + delta
        pos = dirs[:, None, :] * depth_s[..., None]
        pos = pos.reshape(-1, 3)
        delta = delta.ravel()
        keep = depth_s.ravel() > 1e-6
        world = geometry.transform_point(pose, pos)
        behind = delta > 0.0
        in_bounds = np.all(world >= scene.bounds_lo, axis=1) \
            & np.all(world <= scene.bounds_hi, axis=1)
        keep &= ~behind | in_bounds
        if mode == "oracle":
            y = scene_sdf(scene, world)
            keep &= np.abs(y) <= near_band
        else:
            y = -delta
        idx = np.flatnonzero(keep)
        near = PointSet(pos[idx], np.full(idx.size, KIND_NEAR_SURFACE),
                        y[idx], np.ones(idx.size),
                        np.zeros(idx.size), np.zeros(idx.size))
        parts.append(near)

    if n_free > 0 and n_hits > 0:
        lo = 0.2 * d_hit
        hi = d_hit - near_band
        u = rng.uniform(0.0, 1.0, size=(n_hits, n_free))
        t = lo[:, None] + u * (hi - lo)[:, None]
        valid = np.repeat(hi > lo, n_free)
        pos = (dirs[:, None, :] * t[..., None]).reshape(-1, 3)
        t = t.ravel()
        idx = np.flatnonzero(valid)
        free = PointSet(pos[idx], np.full(idx.size, KIND_FREE_SPACE),
                        np.zeros(idx.size), np.ones(idx.size),
                        np.zeros(idx.size), (d_hit[:, None]
                                             - t.reshape(n_hits, n_free)
                                             ).ravel()[idx])
        parts.append(free)

    return PointSet.concat(parts)


def interpolate_pose(a: geometry.Pose, b: geometry.Pose,
                     s: float) -> geometry.Pose:
    """Position lerp + rotation slerp via Exp of the scaled Log."""
    w = geometry.so3_log(a.rotation.T @ b.rotation)
    rot = a.rotation @ geometry.so3_exp(s * w)
    trans = (1.0 - s) * a.translation + s * b.translation
    return geometry.Pose(rot, trans)


def simulate_trajectory(scene: Scene, waypoints: list, sensor: SensorModel,
                        frames_per_leg: int, rng: np.random.Generator,
                        mode: str = "isdf-like", n_near: int = 2,
                        n_free: int = 3, near_band: float = 0.3) -> list:
    """Render and label one frame per interpolated pose.

    Returns a list of (ground-truth Pose, PointSet) tuples with exactly
    (len(waypoints) - 1) * frames_per_leg entries.
    """
    out = []
    for a, b in zip(waypoints, waypoints[1:]):
        for j in range(frames_per_leg):
            pose = interpolate_pose(a, b, j / frames_per_leg)
            depths, hit, dirs = render_depth(scene, pose, sensor, rng)
            points = label_points(scene, pose, depths, hit, dirs, rng,
                                  mode=mode, n_near=n_near, n_free=n_free,
                                  near_band=near_band)
            out.append((pose, points))
    return out


def split_submaps(frames: list, every_n: int) -> list:
    """Group (pose, PointSet) frames into contiguous submap shells.

    Each shell is a dict with the submap's base pose (its first frame's
    pose), frames re-expressed in the submap frame, and the axis-aligned
    bounding box of the contained points (submap frame, no margin).
    """
    if every_n < 1:
        raise ShapeMismatch("every_n must be >= 1")
    shells = []
    for start in range(0, len(frames), every_n):
        block = frames[start:start + every_n]
        base = block[0][0].copy()
        base_inv = geometry.inverse(base)
        rel = [(geometry.compose(base_inv, pose), points)
               for pose, points in block]
        all_pts = np.concatenate([
            geometry.transform_point(p, pts.pos) for p, pts in rel
            if len(pts) > 0]) if any(len(pts) > 0 for _, pts in block) \
            else np.zeros((0, 3))
        lo = all_pts.min(axis=0) if all_pts.size else np.zeros(3)
        hi = all_pts.max(axis=0) if all_pts.size else np.zeros(3)
        shells.append({
            "base_pose": base,
            "frames": rel,
            "box_lo": lo,
            "box_hi": hi,
            "first_index": start,
        })
    return shells


# ---- procedural scenes ----

def default_room_scene() -> Scene:
    """The 6 x 5 x 3 m hollow room with a few interior objects."""
    room = HollowRoom(np.array([0.0, 0.0, 1.5]),
                      np.array([3.0, 2.5, 1.5]), 0.3)
    objects = [
        Box(np.array([1.2, -1.0, 0.4]), np.array([0.5, 0.35, 0.4])),
        Sphere(np.array([-1.4, 1.0, 0.5]), 0.5),
        Box(np.array([-1.0, -1.5, 0.9]), np.array([0.3, 0.3, 0.9])),
    ]
    lo = np.array([-3.3, -2.8, -0.3])
    hi = np.array([3.3, 2.8, 3.3])
    return Scene([room] + objects, lo, hi)


def random_room_scene(rng: np.random.Generator,
                      n_objects: tuple = (2, 4)) -> Scene:
    """A randomized hollow room with boxes and spheres on the floor."""
    half = np.array([rng.uniform(2.2, 3.2), rng.uniform(1.8, 2.8),
                     rng.uniform(1.2, 1.6)])
    center = np.array([0.0, 0.0, half[2]])
    thickness = 0.3
    room = HollowRoom(center, half, thickness)
    prims = [room]
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    for _ in range(count):
        cx = rng.uniform(-half[0] + 0.8, half[0] - 0.8)
        cy = rng.uniform(-half[1] + 0.8, half[1] - 0.8)
        if rng.uniform() < 0.5:
            he = np.array([rng.uniform(0.25, 0.55), rng.uniform(0.25, 0.55),
                           rng.uniform(0.3, 0.9)])
            prims.append(Box(np.array([cx, cy, he[2]]), he))
        else:
            r = rng.uniform(0.3, 0.55)
            prims.append(Sphere(np.array([cx, cy, r]), r))
    margin = thickness + 0.05
    lo = center - half - margin
    hi = center + half + margin
    return Scene(prims, lo, hi)


def orbit_waypoints(scene: Scene, n: int = 5, radius_frac: float = 0.45,
                    height: float | None = None) -> list:
    """Poses on a horizontal circle inside the scene, facing tangentially.

    Consecutive waypoints are 2 pi / n apart so the yaw step stays below
    pi and interpolates cleanly; needs at least 3 waypoints.
    """
    if n < 3:
        raise ShapeMismatch("orbit needs >= 3 waypoints")
    room = next((p for p in scene.primitives if isinstance(p, HollowRoom)),
                None)
    if room is not None:
        center = room.center.copy()
        r = radius_frac * float(min(room.half_extents[0],
                                    room.half_extents[1]))
        z = height if height is not None else room.center[2]
    else:
        center = 0.5 * (scene.bounds_lo + scene.bounds_hi)
        r = radius_frac * float(np.min(scene.bounds_hi - scene.bounds_lo) / 2)
        z = height if height is not None else center[2]
    poses = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        eye = np.array([center[0] + r * np.cos(a),
                        center[1] + r * np.sin(a), z])
        yaw = a + np.pi / 2.0
        rot = geometry.so3_exp(np.array([0.0, 0.0, yaw]))
        poses.append(geometry.Pose(rot, eye))
    return poses


# ---- config round trip ----

def scene_from_config(cfg: Config) -> Scene:
    lo = cfg.get_vec("bounds_lo")
    hi = cfg.get_vec("bounds_hi")
    prims = []
    for line in cfg.get_list("primitive"):
        prims.append(_parse_primitive(line))
    if not prims:
        raise IoError("scene config lists no primitives")
    if lo is None or hi is None:
        raise IoError("scene config needs bounds_lo and bounds_hi")
    return Scene(prims, lo, hi)


def _parse_primitive(line: str):
    tokens = line.split()
    if not tokens:
        raise IoError("empty primitive line")
    kind, kv = tokens[0], {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise IoError(f"bad primitive token {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = np.array([float(x) for x in v.split(",")])
    try:
        if kind == "sphere":
            return Sphere(kv["center"], float(kv["radius"][0]))
        if kind == "box":
            return Box(kv["center"], kv["half"])
        if kind == "hollow_room":
            return HollowRoom(kv["center"], kv["half"],
                              float(kv["thickness"][0]))
    except KeyError as exc:
        raise IoError(f"primitive {kind!r} missing field {exc}") from exc
    raise IoError(f"unknown primitive kind {kind!r}")


def scene_to_config(scene: Scene, cfg: Config | None = None) -> Config:
    cfg = cfg or Config()
    cfg.set("bounds_lo", _fmt_vec(scene.bounds_lo))
    cfg.set("bounds_hi", _fmt_vec(scene.bounds_hi))
    lines = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            lines.append(f"sphere center={_fmt_vec(p.center)} "
                         f"radius={p.radius:.17g}")
        elif isinstance(p, Box):
            lines.append(f"box center={_fmt_vec(p.center)} "
                         f"half={_fmt_vec(p.half_extents)}")
        else:
            lines.append(f"hollow_room center={_fmt_vec(p.center)} "
                         f"half={_fmt_vec(p.half_extents)} "
                         f"thickness={p.thickness:.17g}")
    cfg.entries["primitive"] = lines if len(lines) > 1 else lines[0]
    return cfg


def _fmt_vec(v) -> str:
    return ",".join(f"{float(x):.17g}" for x in v)


def sensor_from_config(cfg: Config) -> SensorModel:
    base = SensorModel()
    return SensorModel(
        kind=cfg.get_str("sensor.kind", base.kind),
        fx=cfg.get_float("sensor.fx", base.fx),
        fy=cfg.get_float("sensor.fy", base.fy),
        cx=cfg.get_float("sensor.cx", base.cx),
        cy=cfg.get_float("sensor.cy", base.cy),
        width=cfg.get_int("sensor.width", base.width),
        height=cfg.get_int("sensor.height", base.height),
        n_azimuth=cfg.get_int("sensor.n_azimuth", base.n_azimuth),
        n_elevation=cfg.get_int("sensor.n_elevation", base.n_elevation),
        elevation_lo=cfg.get_float("sensor.elevation_lo", base.elevation_lo),
        elevation_hi=cfg.get_float("sensor.elevation_hi", base.elevation_hi),
        max_range=cfg.get_float("sensor.max_range", base.max_range),
        noise_sigma=cfg.get_float("sensor.noise_sigma", base.noise_sigma),
    )
