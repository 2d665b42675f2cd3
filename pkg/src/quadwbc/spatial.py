"""Rotation-group and frame arithmetic shared by the whole control stack.

Conventions:
  - Rotation matrices map body-frame vectors into the world frame: v_w = R v_b.
  - The projected frame sits at the ground projection of the CoM, z up,
    x along the extracted heading. Ground plane is fixed at world z = 0.
  - All functions are pure; none hold state.
"""
from __future__ import annotations

import enum
import math

import numpy as np

ROTATION_TOL = 1e-9
_VERTICAL_TOL = 1e-6

WORLD_UP = np.array([0.0, 0.0, 1.0])


class FrameTag(enum.Enum):
    WORLD = "world"
    BODY = "body"
    PROJECTED = "projected"


class HeadingMode(enum.Enum):
    """How the planar heading is extracted from the base orientation.

    QUADRUPED projects the body x-axis onto the ground plane. BIPED projects
    the body -z axis, which points forward once the base is pitched upright.
    """

    QUADRUPED = "quadruped"
    BIPED = "biped"


class DegenerateHeadingError(ValueError):
    """Heading axis within tolerance of vertical; projected frame undefined."""


def skew(a) -> np.ndarray:
    """Map a 3-vector to the matrix S with S @ b == cross(a, b)."""
    x, y, z = np.asarray(a, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S, tol: float = ROTATION_TOL) -> np.ndarray:
    """Inverse of skew. Rejects matrices that are not antisymmetric within tol."""
    S = np.asarray(S, dtype=float).reshape(3, 3)
    if np.max(np.abs(S + S.T)) > tol:
        raise ValueError("vee: input is not antisymmetric within tolerance")
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def exp_so3(a) -> np.ndarray:
    """Rodrigues formula: rotation matrix for the axis-angle vector a."""
    a = np.asarray(a, dtype=float).reshape(3)
    theta = float(np.linalg.norm(a))
    S = skew(a)
    if theta < 1e-10:
        # second-order Taylor keeps the result orthonormal to machine precision
        return np.eye(3) + S + 0.5 * (S @ S)
    s = math.sin(theta) / theta
    c = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + s * S + c * (S @ S)


def log_so3(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, magnitude in [0, pi].

    Three numerically guarded branches: small angle (Taylor of the sinc
    inverse), generic, and near-pi where the axis is recovered from the
    largest diagonal entry of R + I.
    """
    R = np.asarray(R, dtype=float).reshape(3, 3)
    trace = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = math.acos(trace)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])

    if theta < 1e-7:
        # log(R) ~ (R - R^T)/2 for small angles
        return 0.5 * w
    if theta < math.pi - 1e-5:
        return (theta / (2.0 * math.sin(theta))) * w

    # Near pi the off-diagonal difference vanishes; use B = (R + I)/2 whose
    # columns are proportional to the axis. Pick the best-conditioned one.
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-16))
    axis = axis / np.linalg.norm(axis)
    # w carries the sign of sin(theta) * axis; align axis with it when it
    # is not fully degenerate so the branch is continuous across theta < pi.
    if float(axis @ w) < 0.0:
        axis = -axis
    return theta * axis


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(R) -> np.ndarray:
    """Project a near-rotation back onto SO(3) (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float).reshape(3, 3))
    out = U @ Vt
    if np.linalg.det(out) < 0.0:
        out = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return out


def heading_vector(R, mode: HeadingMode) -> np.ndarray:
    """World-frame forward axis of the base before ground projection."""
    R = np.asarray(R, dtype=float)
    if mode is HeadingMode.QUADRUPED:
        return R[:, 0].copy()
    return -R[:, 2].copy()


def projected_frame(base_pos, base_rot, mode: HeadingMode = HeadingMode.QUADRUPED):
    """Origin and rotation of the projected frame for a base pose.

    The origin is the CoM ground projection (zero height); the returned
    rotation has z = world up and x = the heading axis projected onto the
    ground plane. Raises DegenerateHeadingError when the heading axis is
    within 1e-6 of vertical.
    """
    p = np.asarray(base_pos, dtype=float).reshape(3)
    h = heading_vector(base_rot, mode)
    hx, hy = h[0], h[1]
    norm = math.hypot(hx, hy)
    if norm < _VERTICAL_TOL:
        raise DegenerateHeadingError(
            f"heading axis nearly vertical (planar norm {norm:.2e}) in mode {mode.value}"
        )
    x_axis = np.array([hx / norm, hy / norm, 0.0])
    y_axis = np.array([-x_axis[1], x_axis[0], 0.0])
    R_p = np.column_stack([x_axis, y_axis, WORLD_UP])
    origin = np.array([p[0], p[1], 0.0])
    return origin, R_p


def heading_yaw(R, mode: HeadingMode = HeadingMode.QUADRUPED) -> float:
    """Yaw angle of the projected-frame x axis."""
    h = heading_vector(R, mode)
    norm = math.hypot(h[0], h[1])
    if norm < _VERTICAL_TOL:
        raise DegenerateHeadingError("heading axis nearly vertical")
    return math.atan2(h[1], h[0])


def world_to_projected(v, origin, R_p) -> np.ndarray:
    """Express a world-frame point in the projected frame."""
    return R_p.T @ (np.asarray(v, dtype=float) - origin)


def projected_to_world(v, origin, R_p) -> np.ndarray:
    return origin + R_p @ np.asarray(v, dtype=float)
