import numpy as np
import pytest

import gridslam.geometry as geo
import gridslam.sim as sim
from gridslam.costs import KIND_FREE_SPACE, KIND_NEAR_SURFACE
from gridslam.errors import SensorInsideSurface, ShapeMismatch
from gridslam.io import Config


def test_sphere_sdf_exact():
    scene = sim.Scene(primitives=[sim.Sphere(np.zeros(3), 1.0)],
                      bounds_lo=-np.ones(3) * 2, bounds_hi=np.ones(3) * 2)
    x = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.5, 0.0]])
    assert np.allclose(sim.scene_sdf(scene, x), [-1.0, 1.0, -0.5])


def test_box_sdf_outside_corner():
    scene = sim.Scene(primitives=[sim.Box(np.zeros(3),
                                          np.array([1.0, 1.0, 1.0]))],
                      bounds_lo=-np.ones(3) * 3, bounds_hi=np.ones(3) * 3)
    # distance from (2,2,2) to the corner (1,1,1)
    got = sim.scene_sdf(scene, np.array([2.0, 2.0, 2.0]))
    assert got == pytest.approx(np.sqrt(3.0), rel=1e-12)
    # inside: negative of the distance to the nearest face
    assert sim.scene_sdf(scene, np.array([0.2, 0.0, 0.0])) \
        == pytest.approx(-0.8)


def test_union_takes_min():
    scene = sim.Scene(
        primitives=[sim.Sphere(np.zeros(3), 1.0),
                    sim.Sphere(np.array([4.0, 0.0, 0.0]), 1.0)],
        bounds_lo=-np.ones(3) * 6, bounds_hi=np.ones(3) * 6)
    assert sim.scene_sdf(scene, np.array([3.5, 0.0, 0.0])) \
        == pytest.approx(-0.5)


def test_hollow_room_shell():
    scene = sim.default_room_scene()
    room = scene.primitives[0]
    assert isinstance(room, sim.HollowRoom)
    center_sdf = sim.scene_sdf(
        sim.Scene([room], scene.bounds_lo, scene.bounds_hi), room.center)
    # cavity interior is positive distance to the inner wall
    assert center_sdf > 0.5


def test_render_depth_hits_surface():
    scene = sim.default_room_scene()
    sensor = sim.SensorModel()
    pose = geo.Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
    depths, hit, dirs = sim.render_depth(scene, pose, sensor)
    assert hit.mean() > 0.9
    world = geo.transform_point(pose, dirs[hit] * depths[hit, None])
    surf = sim.scene_sdf(scene, world)
    assert np.max(np.abs(surf)) < 1e-4


def test_render_depth_inside_raises():
    scene = sim.default_room_scene()
    sensor = sim.SensorModel()
    # a pose buried inside the room's wall shell has sdf <= 0
    room = scene.primitives[0]
    buried = room.center + np.array([room.half_extents[0] + room.thickness / 2,
                                     0.0, 0.0])
    assert sim.scene_sdf(scene, buried) <= 0.0
    pose = geo.Pose(np.eye(3), buried)
    with pytest.raises(SensorInsideSurface):
        sim.render_depth(scene, pose, sensor)


def test_label_points_oracle_targets_match_scene():
    rng = np.random.default_rng(0)
    scene = sim.default_room_scene()
    sensor = sim.SensorModel()
    pose = geo.Pose(np.eye(3), np.array([0.3, -0.2, 1.4]))
    depths, hit, dirs = sim.render_depth(scene, pose, sensor)
    pts = sim.label_points(scene, pose, depths, hit, dirs, rng,
                           mode="oracle", n_near=2, n_free=3)
    near = pts.select(pts.kind == KIND_NEAR_SURFACE)
    world = geo.transform_point(pose, near.pos)
    want = sim.scene_sdf(scene, world)
    got = near.sdf
    # surface samples carry target 0 with |sdf| < trace eps; off-surface
    # oracle samples carry the exact sdf
    assert np.allclose(got[got != 0.0], want[got != 0.0], atol=1e-12)
    assert np.max(np.abs(want[got == 0.0])) < 1e-4
    assert np.all(np.abs(near.sdf) <= 0.3 + 1e-12)


def test_label_points_free_space_bounds():
    rng = np.random.default_rng(1)
    scene = sim.default_room_scene()
    sensor = sim.SensorModel()
    pose = geo.Pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
    depths, hit, dirs = sim.render_depth(scene, pose, sensor)
    pts = sim.label_points(scene, pose, depths, hit, dirs, rng,
                           mode="isdf-like")
    free = pts.select(pts.kind == KIND_FREE_SPACE)
    assert len(free) > 0
    # free-space samples sit strictly in front of the surface, so the
    # true sdf respects the bounds
    world = geo.transform_point(pose, free.pos)
    true_sdf = sim.scene_sdf(scene, world)
    assert np.all(true_sdf >= free.bound_lo - 1e-9)
    assert np.all(free.bound_hi > 0.0)


def test_label_points_bad_mode():
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeMismatch):
        sim.label_points(sim.default_room_scene(), geo.identity_pose(),
                         np.zeros(0), np.zeros(0, bool), np.zeros((0, 3)),
                         rng, mode="nope")


def test_simulate_trajectory_frame_count():
    rng = np.random.default_rng(3)
    scene = sim.default_room_scene()
    waypoints = sim.orbit_waypoints(scene, n=4)
    frames = sim.simulate_trajectory(scene, waypoints, sim.SensorModel(),
                                     frames_per_leg=2, rng=rng)
    assert len(frames) == (len(waypoints) - 1) * 2
    for pose, points in frames:
        assert len(points) > 0
        assert np.allclose(pose.rotation @ pose.rotation.T, np.eye(3),
                           atol=1e-12)


def test_orbit_waypoints_guard():
    scene = sim.default_room_scene()
    with pytest.raises(ShapeMismatch):
        sim.orbit_waypoints(scene, n=2)
    pts = sim.orbit_waypoints(scene, n=6)
    assert len(pts) == 6


def test_split_submaps_reexpresses_frames():
    rng = np.random.default_rng(4)
    scene = sim.default_room_scene()
    waypoints = sim.orbit_waypoints(scene, n=4)
    frames = sim.simulate_trajectory(scene, waypoints, sim.SensorModel(),
                                     frames_per_leg=2, rng=rng)
    shells = sim.split_submaps(frames, 3)
    assert len(shells) == 2
    assert shells[0]["first_index"] == 0
    assert shells[1]["first_index"] == 3
    # base pose is the first frame, so the first relative pose is identity
    rel0 = shells[0]["frames"][0][0]
    assert np.allclose(rel0.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(rel0.translation, 0.0, atol=1e-12)
    # world position of a labeled point is preserved through the split
    base = shells[1]["base_pose"]
    rel_pose, rel_pts = shells[1]["frames"][1]
    world_split = geo.transform_point(geo.compose(base, rel_pose),
                                      rel_pts.pos)
    world_orig = geo.transform_point(frames[4][0], frames[4][1].pos)
    assert np.allclose(world_split, world_orig, atol=1e-12)


def test_split_submaps_box_covers_points():
    rng = np.random.default_rng(5)
    scene = sim.default_room_scene()
    waypoints = sim.orbit_waypoints(scene, n=4)
    frames = sim.simulate_trajectory(scene, waypoints, sim.SensorModel(),
                                     frames_per_leg=2, rng=rng)
    for shell in sim.split_submaps(frames, 4):
        for rel_pose, pts in shell["frames"]:
            local = geo.transform_point(rel_pose, pts.pos)
            assert np.all(local >= shell["box_lo"] - 1e-9)
            assert np.all(local <= shell["box_hi"] + 1e-9)


def test_scene_config_roundtrip():
    scene = sim.default_room_scene()
    cfg = sim.scene_to_config(scene)
    back = sim.scene_from_config(cfg)
    assert len(back.primitives) == len(scene.primitives)
    rng = np.random.default_rng(6)
    x = rng.uniform(-2, 2, size=(50, 3))
    assert np.allclose(sim.scene_sdf(scene, x), sim.scene_sdf(back, x),
                       atol=1e-12)
    assert np.allclose(back.bounds_lo, scene.bounds_lo)
    assert np.allclose(back.bounds_hi, scene.bounds_hi)


def test_sensor_config_roundtrip():
    sensor = sim.SensorModel(n_azimuth=17, n_elevation=5, max_range=7.5,
                             noise_sigma=0.01)
    cfg = Config()
    cfg.set("sensor.n_azimuth", "17")
    cfg.set("sensor.n_elevation", "5")
    cfg.set("sensor.max_range", "7.5")
    cfg.set("sensor.noise_sigma", "0.01")
    back = sim.sensor_from_config(cfg)
    assert back.n_azimuth == sensor.n_azimuth
    assert back.n_elevation == sensor.n_elevation
    assert back.max_range == sensor.max_range
    assert back.noise_sigma == sensor.noise_sigma


def test_random_room_scene_seeded():
    a = sim.random_room_scene(np.random.default_rng(7))
    b = sim.random_room_scene(np.random.default_rng(7))
    x = np.random.default_rng(8).uniform(-2, 2, size=(20, 3))
    assert np.allclose(sim.scene_sdf(a, x), sim.scene_sdf(b, x))


def test_ray_directions_unit_norm():
    sensor = sim.SensorModel()
    dirs = sensor.ray_directions()
    assert dirs.shape == (sensor.n_azimuth * sensor.n_elevation, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
