import numpy as np
import pytest

import gridslam.geometry as geo
from gridslam.errors import AngleNearPi
from helpers import fd_gradient, random_pose, rel_err


def test_so3_exp_log_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = rng.normal(size=3)
        w *= rng.uniform(1e-8, 3.0) / np.linalg.norm(w)
        rot = geo.so3_exp(w)
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.allclose(geo.so3_log(rot), w, atol=1e-9)


def test_so3_exp_small_angle_series():
    w = np.array([1e-12, -2e-12, 5e-13])
    rot = geo.so3_exp(w)
    assert np.allclose(rot, np.eye(3) + geo.so3_hat(w), atol=1e-20)


def test_so3_log_near_pi_raises():
    rot = geo.so3_exp(np.array([np.pi - 1e-9, 0.0, 0.0]))
    with pytest.raises(AngleNearPi):
        geo.so3_log(rot)
    # just inside the guard still works
    w = np.array([np.pi - 1e-3, 0.0, 0.0])
    assert np.allclose(geo.so3_log(geo.so3_exp(w)), w, atol=1e-8)


def test_se3_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        eps = rng.normal(size=6)
        eps[:3] *= rng.uniform(1e-7, 2.8) / np.linalg.norm(eps[:3])
        pose = geo.se3_exp(eps)
        assert np.allclose(geo.se3_log(pose), eps, atol=1e-8)


def test_se3_exp_zero_is_identity():
    pose = geo.se3_exp(np.zeros(6))
    assert np.allclose(pose.rotation, np.eye(3))
    assert np.allclose(pose.translation, 0.0)


def test_compose_inverse():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = random_pose(rng)
        b = random_pose(rng)
        ab = geo.compose(a, b)
        x = rng.normal(size=(4, 3))
        want = geo.transform_point(a, geo.transform_point(b, x))
        assert np.allclose(geo.transform_point(ab, x), want, atol=1e-12)
        ident = geo.compose(a, geo.inverse(a))
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)


def test_so3_left_jacobian_fd():
    # Jl(w) maps dw to the left-trivialized change of Exp(w)
    rng = np.random.default_rng(3)
    for _ in range(20):
        w = rng.normal(size=3)
        w *= rng.uniform(0.01, 2.5) / np.linalg.norm(w)
        jl = geo.so3_left_jacobian(w)
        h = 1e-7
        for i in range(3):
            dw = np.zeros(3)
            dw[i] = h
            num = geo.so3_log(geo.so3_exp(w + dw) @ geo.so3_exp(w).T) / h
            assert rel_err(num, jl[:, i]) < 1e-5
        assert np.allclose(geo.so3_left_jacobian_inv(w) @ jl, np.eye(3),
                           atol=1e-10)


def test_se3_right_jacobian_fd():
    # Jr(eps) maps deps to Log(Exp(eps)^-1 Exp(eps + deps))
    rng = np.random.default_rng(4)
    for _ in range(20):
        eps = rng.normal(size=6) * 0.8
        jr = geo.se3_right_jacobian(eps)
        h = 1e-7
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            moved = geo.compose(geo.inverse(geo.se3_exp(eps)),
                                geo.se3_exp(eps + d))
            num = geo.se3_log(moved) / h
            assert rel_err(num, jr[:, i]) < 1e-5


def test_se3_q_matrix_small_angle_branch():
    # series and closed form agree just across the switch point
    rho = np.array([0.3, -0.2, 0.5])
    for theta in (0.09999, 0.10001):
        w = np.array([theta, 0.0, 0.0])
        q = geo.se3_q_matrix(w, rho)
        h = 1e-7
        eps = np.concatenate([w, rho])
        jl = geo.se3_left_jacobian(eps)
        for i in range(3):
            d = np.zeros(6)
            d[i] = h
            moved = geo.compose(geo.se3_exp(eps + d),
                                geo.inverse(geo.se3_exp(eps)))
            num = geo.se3_log(moved) / h
            assert rel_err(num, jl[:, i]) < 1e-4
    assert q.shape == (3, 3)


def test_perturb_pose_magnitudes():
    # rotation angle is exact; translation passes through V(w) so it
    # lands within O(theta) of the requested norm
    rng = np.random.default_rng(5)
    for _ in range(10):
        pose = random_pose(rng)
        out = geo.perturb_pose(pose, 3.0, 0.05, rng)
        rot_err, tran_err = geo.pose_error(pose, out)
        assert abs(rot_err - 3.0) < 1e-9
        assert abs(tran_err - 0.05) < 0.05 * 0.03


def test_pose_error_identity():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    rot_err, tran_err = geo.pose_error(pose, pose)
    assert rot_err < 1e-7
    assert tran_err == 0.0


def test_re_orthonormalize():
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    drift = pose.rotation + rng.normal(size=(3, 3)) * 1e-4
    fixed = geo.re_orthonormalize(geo.Pose(drift, pose.translation))
    assert np.allclose(fixed.rotation @ fixed.rotation.T, np.eye(3),
                       atol=1e-12)
    assert np.linalg.det(fixed.rotation) > 0
    assert rel_err(fixed.rotation, pose.rotation) < 1e-3


def test_transform_point_shapes():
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    x = rng.normal(size=(5, 3))
    moved = geo.transform_point(pose, x)
    assert moved.shape == (5, 3)
    single = geo.transform_point(pose, x[0])
    assert np.allclose(single, moved[0])
