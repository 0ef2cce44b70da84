"""SE(3) poses, exponential/logarithm maps, and twist Jacobians.

Twists are 6-vectors ordered (rotational part rad, translational part m).
Rotations are stored as 3x3 matrices; small-angle branches switch to
second-order Taylor series below ``SMALL_ANGLE`` to avoid catastrophic
cancellation in the sinc-like coefficients.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

SMALL_ANGLE = 1e-8
# Coefficients of the SE(3) Jacobian coupling block cancel more harshly,
# so that branch switches to series form earlier.
Q_SERIES_ANGLE = 0.1


@dataclass
class Pose:
    """Rigid transform: x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def identity_pose() -> Pose:
    return Pose()


def so3_hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from an axis-angle 3-vector."""
    theta = float(np.linalg.norm(w))
    hat = so3_hat(w)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * hat + b * (hat @ hat)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm; raises AngleNearPi near the cut."""
    theta = rotation_angle(rot)
    if theta >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    vee = so3_vee(rot - rot.T)
    if theta < SMALL_ANGLE:
        return 0.5 * vee
    return (theta / (2.0 * np.sin(theta))) * vee


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    hat = so3_hat(w)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta * theta / 24.0
        c = 1.0 / 6.0 - theta * theta / 120.0
    else:
        b = (1.0 - np.cos(theta)) / (theta * theta)
        c = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + b * hat + c * (hat @ hat)


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    hat = so3_hat(w)
    if theta < SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        d = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * hat + d * (hat @ hat)


def se3_exp(eps: np.ndarray) -> Pose:
    """Exponential map from a twist (rot, trans) to a Pose."""
    eps = np.asarray(eps, float)
    w = eps[:3]
    rho = eps[3:]
    rot = so3_exp(w)
    t = so3_left_jacobian(w) @ rho
    return Pose(rot, t)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp on the principal branch."""
    w = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, rho])


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation,
                a.rotation @ b.translation + a.translation)


def inverse(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def transform_point(pose: Pose, x: np.ndarray) -> np.ndarray:
    """Apply the pose to a 3-vector or an [n, 3] batch."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        return pose.rotation @ x + pose.translation
    return x @ pose.rotation.T + pose.translation


def perturb_pose(pose: Pose, rot_err_deg: float, tran_err_m: float,
                 rng: np.random.Generator) -> Pose:
    """Right-multiply by Exp of a twist with exact error magnitudes.

    The twist's rotational part has exactly the requested angle about a
    uniformly random axis; its translational part has exactly the
    requested norm in a uniformly random direction.
    """
    axis = _random_unit(rng)
    direction = _random_unit(rng)
    eps = np.concatenate([
        axis * np.deg2rad(rot_err_deg),
        direction * tran_err_m,
    ])
    return compose(pose, se3_exp(eps))


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def pose_error(a: Pose, b: Pose):
    """(rotation error in degrees, translation error in meters)."""
    rel = a.rotation.T @ b.rotation
    return np.rad2deg(rotation_angle(rel)), \
        float(np.linalg.norm(a.translation - b.translation))


def re_orthonormalize(pose: Pose) -> Pose:
    """Project the rotation back onto SO(3) via polar decomposition."""
    u, _, vt = np.linalg.svd(pose.rotation)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return Pose(rot, pose.translation.copy())


def _q_coeffs(theta: float):
    if theta < Q_SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        c1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0
        c3 = -1.0 / 120.0 + t2 / 5040.0 - t4 / 362880.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        t3 = theta ** 3
        c1 = (theta - s) / t3
        c2 = (theta * theta / 2.0 + c - 1.0) / theta ** 4
        c3 = (theta - s - t3 / 6.0) / theta ** 5
    return c1, c2, c3


def se3_q_matrix(w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Coupling block of the SE(3) left Jacobian."""
    theta = float(np.linalg.norm(w))
    wh = so3_hat(w)
    rh = so3_hat(rho)
    c1, c2, c3 = _q_coeffs(theta)
    wh2 = wh @ wh
    m1 = wh @ rh + rh @ wh + wh @ rh @ wh
    m2 = wh2 @ rh + rh @ wh2 - 3.0 * (wh @ rh @ wh)
    m3 = wh @ rh @ wh2 + wh2 @ rh @ wh
    return 0.5 * rh + c1 * m1 + c2 * m2 + 0.5 * (c2 + 3.0 * c3) * m3


def se3_left_jacobian(eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, float)
    w, rho = eps[:3], eps[3:]
    j = so3_left_jacobian(w)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[3:, 3:] = j
    out[3:, :3] = se3_q_matrix(w, rho)
    return out


def se3_right_jacobian(eps: np.ndarray) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(eps, float))
