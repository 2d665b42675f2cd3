"""Robot description and per-leg kinematics.

Leg model: 3-DoF (abduction about x, hip flexion about y, knee about y),
zero position = legs straight down, knee-backward bending branch. Joint
vector ordering is (FL, FR, RL, RR) x (abduction, hip flexion, knee) and is
shared by every module.

All foot positions are expressed in the body frame relative to the base
origin (assumed CoM).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .spatial import rot_x, rot_y

GRAVITY = 9.81
N_LEGS = 4
N_JOINTS = 12


class LegIndex(enum.IntEnum):
    FL = 0
    FR = 1
    RL = 2
    RR = 3


class LegRole(enum.Enum):
    LOCOMOTION = "locomotion"
    MANIPULATION = "manipulation"


# +1 for left legs, -1 for right legs (sign of the lateral hip offset)
LEG_SIDE = {LegIndex.FL: 1.0, LegIndex.FR: -1.0, LegIndex.RL: 1.0, LegIndex.RR: -1.0}


class ReachError(ValueError):
    """IK target outside the reachable annulus.

    Carries the nearest-reachable joint solution in ``q_clamped`` so control
    paths can saturate instead of aborting.
    """

    def __init__(self, message: str, q_clamped: np.ndarray):
        super().__init__(message)
        self.q_clamped = q_clamped


def _diag(values) -> np.ndarray:
    return np.diag(np.asarray(values, dtype=float))


@dataclass
class RobotConfig:
    """Masses, geometry, limits, gains and QP weights. SI units throughout."""

    base_mass: float = 15.0                      # kg
    inertia: np.ndarray = field(default_factory=lambda: _diag([0.08, 0.21, 0.23]))  # kg m^2
    hip_offsets: np.ndarray = field(default_factory=lambda: np.array([
        [0.19, 0.047, 0.0],    # FL
        [0.19, -0.047, 0.0],   # FR
        [-0.19, 0.047, 0.0],   # RL
        [-0.19, -0.047, 0.0],  # RR
    ]))
    l_hip: float = 0.095     # lateral offset of the leg plane from the hip
    l_thigh: float = 0.213
    l_calf: float = 0.213

    # per-leg link masses and CoM lever arms (abduction link, thigh, calf)
    link_masses: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.9, 0.15]))
    link_coms: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.10, 0.11]))

    joint_limits_low: np.ndarray = field(
        default_factory=lambda: np.tile([-0.9, -2.9, 0.0], N_LEGS))
    joint_limits_high: np.ndarray = field(
        default_factory=lambda: np.tile([0.9, 2.9, 2.8], N_LEGS))
    default_joint_pos: np.ndarray | None = None  # filled from stand_height when None

    kp_joint: float = 40.0   # joint P gain
    kd_joint: float = 1.0    # joint D gain
    compliance_scale: float = 0.25  # PD scale on manipulation joints in compliance mode
    torque_limit: float = 35.0      # N m, actuator clamp

    friction: float = 0.7
    fz_min: float = 0.0      # vertical force bounds for stance feet
    fz_max: float = 150.0
    manip_force_limit: float = 50.0  # post-solve safety clamp on manipulation forces

    # QP objective weights: 6x6 on the acceleration residual, 3x3 on the
    # manipulation force error, 3x3 regularization on locomotion forces.
    weight_accel: np.ndarray = field(default_factory=lambda: _diag([1, 1, 10, 5, 5, 5]))
    weight_manip_force: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(3))
    # kept tiny so regularization cannot bias the standing force distribution;
    # swing legs get a much stiffer penalty so their solved forces vanish
    weight_force_reg: np.ndarray = field(default_factory=lambda: 1e-12 * np.eye(3))
    swing_reg_scale: float = 1e12

    # base acceleration PD gains (per axis) and saturation
    kp_lin: np.ndarray = field(default_factory=lambda: np.array([20.0, 20.0, 80.0]))
    kd_lin: np.ndarray = field(default_factory=lambda: np.array([12.0, 12.0, 20.0]))
    kp_ang: np.ndarray = field(default_factory=lambda: np.array([300.0, 300.0, 100.0]))
    kd_ang: np.ndarray = field(default_factory=lambda: np.array([30.0, 30.0, 15.0]))
    accel_limit_lin: float = 20.0   # m/s^2
    accel_limit_ang: float = 80.0   # rad/s^2

    stand_height: float = 0.30      # quadruped nominal base height
    stand_height_biped: float = 0.45

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        self.hip_offsets = np.asarray(self.hip_offsets, dtype=float).reshape(N_LEGS, 3)
        if self.default_joint_pos is None:
            self.default_joint_pos = standing_joint_pos(self, self.stand_height)
        self.default_joint_pos = np.asarray(self.default_joint_pos, dtype=float).reshape(N_JOINTS)

    def validate(self) -> None:
        if not self.base_mass > 0:
            raise ValueError("base_mass must be positive")
        if np.max(np.abs(self.inertia - self.inertia.T)) > 1e-12:
            raise ValueError("inertia must be symmetric")
        if np.min(np.linalg.eigvalsh(self.inertia)) <= 0:
            raise ValueError("inertia must be positive definite")
        if self.l_thigh <= 0 or self.l_calf <= 0:
            raise ValueError("link lengths must be positive")
        if not (self.fz_min >= 0 and self.fz_max > self.fz_min):
            raise ValueError("need 0 <= fz_min < fz_max")
        if self.kp_joint < 0 or self.kd_joint < 0:
            raise ValueError("joint PD gains must be non-negative")
        for name in ("weight_accel", "weight_manip_force", "weight_force_reg"):
            w = getattr(self, name)
            if np.min(np.linalg.eigvalsh(0.5 * (w + w.T))) <= 0:
                raise ValueError(f"{name} must be positive definite")

    def with_overrides(self, **kw) -> "RobotConfig":
        return replace(self, **kw)


def leg_slice(leg: LegIndex) -> slice:
    return slice(3 * int(leg), 3 * int(leg) + 3)


def _leg_chain(q_leg, leg: LegIndex, cfg: RobotConfig):
    """Joint origins/axes and foot position for one leg, body frame."""
    q1, q2, q3 = [float(v) for v in q_leg]
    s = LEG_SIDE[LegIndex(leg)]
    h = cfg.hip_offsets[int(leg)]

    R1 = rot_x(q1)
    o1 = h
    a1 = np.array([1.0, 0.0, 0.0])
    o2 = h + R1 @ np.array([0.0, s * cfg.l_hip, 0.0])
    a2 = R1[:, 1]
    R2 = R1 @ rot_y(q2)
    o3 = o2 + R2 @ np.array([0.0, 0.0, -cfg.l_thigh])
    a3 = a2
    R3 = R2 @ rot_y(q3)
    foot = o3 + R3 @ np.array([0.0, 0.0, -cfg.l_calf])
    return (o1, o2, o3), (a1, a2, a3), (R1, R2, R3), foot


def leg_fk(q_leg, leg: LegIndex, cfg: RobotConfig) -> np.ndarray:
    """Foot position in the body frame."""
    return _leg_chain(q_leg, leg, cfg)[3]


def leg_jacobian(q_leg, leg: LegIndex, cfg: RobotConfig) -> np.ndarray:
    """3x3 map from joint velocities to body-frame foot velocity."""
    origins, axes, _, foot = _leg_chain(q_leg, leg, cfg)
    J = np.empty((3, 3))
    for k in range(3):
        J[:, k] = np.cross(axes[k], foot - origins[k])
    return J


def leg_ik(p_foot, leg: LegIndex, cfg: RobotConfig, reach_margin: float = 1e-9) -> np.ndarray:
    """Closed-form IK for the body-frame foot target ``p_foot``.

    Selects the knee-backward branch. Raises ReachError (carrying the
    clamped nearest-reachable solution) when the target lies outside the
    reachable annulus.
    """
    p = np.asarray(p_foot, dtype=float).reshape(3)
    s = LEG_SIDE[LegIndex(leg)]
    r = p - cfg.hip_offsets[int(leg)]
    lt, lc = cfg.l_thigh, cfg.l_calf

    clamped = False
    # lateral geometry: the leg plane is offset l_hip from the abduction axis
    yz_sq = r[1] * r[1] + r[2] * r[2]
    if yz_sq < cfg.l_hip * cfg.l_hip:
        clamped = True
        plane_drop_sq = 0.0
    else:
        plane_drop_sq = yz_sq - cfg.l_hip * cfg.l_hip
    z_plane = -math.sqrt(plane_drop_sq)
    q1 = math.atan2(r[2], r[1]) - math.atan2(z_plane, s * cfg.l_hip)
    # wrap so straight-down targets give q1 near 0
    q1 = math.atan2(math.sin(q1), math.cos(q1))

    # planar two-link in the abducted leg plane
    px, pz = r[0], z_plane
    d = math.hypot(px, pz)
    d_min = abs(lt - lc) + reach_margin
    d_max = lt + lc - reach_margin
    if d < d_min or d > d_max:
        clamped = True
        d_new = min(max(d, d_min), d_max)
        if d > 1e-12:
            px *= d_new / d
            pz *= d_new / d
        else:
            px, pz = 0.0, -d_new
        d = d_new

    cos_knee_inner = (lt * lt + lc * lc - d * d) / (2.0 * lt * lc)
    q3 = math.pi - math.acos(min(1.0, max(-1.0, cos_knee_inner)))
    reach_angle = math.atan2(-px, -pz)
    thigh_angle = math.acos(min(1.0, max(-1.0, (lt * lt + d * d - lc * lc) / (2.0 * lt * d))))
    q2 = reach_angle - thigh_angle

    q = np.array([q1, q2, q3])
    if clamped:
        raise ReachError(
            f"foot target {p} outside reachable annulus for leg {LegIndex(leg).name}", q)
    return q


def leg_ik_clamped(p_foot, leg: LegIndex, cfg: RobotConfig):
    """IK that saturates instead of raising. Returns (q, saturated_flag)."""
    try:
        return leg_ik(p_foot, leg, cfg), False
    except ReachError as err:
        return err.q_clamped, True


def _link_com_jacobians(q_leg, leg: LegIndex, cfg: RobotConfig):
    """CoM position and 3x3 Jacobian for each of the three leg links."""
    (o1, o2, o3), (a1, a2, a3), (R1, R2, R3), _ = _leg_chain(q_leg, leg, cfg)
    s = LEG_SIDE[LegIndex(leg)]
    c_hip, c_thigh, c_calf = cfg.link_coms

    com_hip = o1 + R1 @ np.array([0.0, s * c_hip, 0.0])
    com_thigh = o2 + R2 @ np.array([0.0, 0.0, -c_thigh])
    com_calf = o3 + R3 @ np.array([0.0, 0.0, -c_calf])

    origins = (o1, o2, o3)
    axes = (a1, a2, a3)
    out = []
    for n_joints, com in ((1, com_hip), (2, com_thigh), (3, com_calf)):
        J = np.zeros((3, 3))
        for k in range(n_joints):
            J[:, k] = np.cross(axes[k], com - origins[k])
        out.append((com, J))
    return out


def leg_gravity_torque(q_leg, leg: LegIndex, cfg: RobotConfig, g_body) -> np.ndarray:
    """Gravity-holding torques for one leg given body-frame gravity."""
    tau = np.zeros(3)
    for mass, (com, J) in zip(cfg.link_masses, _link_com_jacobians(q_leg, leg, cfg)):
        tau -= J.T @ (mass * g_body)
    return tau


def gravity_compensation(q_j, base_rot, cfg: RobotConfig) -> np.ndarray:
    """Joint torques holding the limb weight, per descendant-link Jacobians.

    ``base_rot`` rotates body vectors to world; gravity enters in the body
    frame as R^T (0, 0, -g).
    """
    q_j = np.asarray(q_j, dtype=float).reshape(N_JOINTS)
    g_body = np.asarray(base_rot, dtype=float).T @ np.array([0.0, 0.0, -GRAVITY])
    tau = np.zeros(N_JOINTS)
    for leg in LegIndex:
        sl = leg_slice(leg)
        tau[sl] = leg_gravity_torque(q_j[sl], leg, cfg, g_body)
    return tau


def leg_fk_jacobian(q_leg, leg: LegIndex, cfg: RobotConfig):
    """Foot position and Jacobian from one chain evaluation."""
    origins, axes, _, foot = _leg_chain(q_leg, leg, cfg)
    J = np.empty((3, 3))
    for k in range(3):
        J[:, k] = np.cross(axes[k], foot - origins[k])
    return foot, J


def nominal_footholds(cfg: RobotConfig, height: float | None = None) -> np.ndarray:
    """Body-frame stance targets: feet straight below the leg planes."""
    h = cfg.stand_height if height is None else height
    feet = np.empty((N_LEGS, 3))
    for leg in LegIndex:
        s = LEG_SIDE[leg]
        feet[int(leg)] = cfg.hip_offsets[int(leg)] + np.array([0.0, s * cfg.l_hip, -h])
    return feet


def standing_joint_pos(cfg: RobotConfig, height: float) -> np.ndarray:
    q = np.empty(N_JOINTS)
    for leg, foot in zip(LegIndex, nominal_footholds(cfg, height)):
        q[leg_slice(leg)], _ = leg_ik_clamped(foot, leg, cfg)
    return q


def all_leg_fk(q_j, cfg: RobotConfig) -> np.ndarray:
    q_j = np.asarray(q_j, dtype=float).reshape(N_JOINTS)
    return np.stack([leg_fk(q_j[leg_slice(leg)], leg, cfg) for leg in LegIndex])


def all_leg_jacobians(q_j, cfg: RobotConfig) -> np.ndarray:
    q_j = np.asarray(q_j, dtype=float).reshape(N_JOINTS)
    return np.stack([leg_jacobian(q_j[leg_slice(leg)], leg, cfg) for leg in LegIndex])


# --- config file I/O ---------------------------------------------------------
#
# Flat "key value" lines; 3x3 matrices as an indented block after the key.
# Units are SI and noted per key in the emitted comments.

_SCALAR_KEYS = [
    ("base_mass", "kg"), ("l_hip", "m"), ("l_thigh", "m"), ("l_calf", "m"),
    ("kp_joint", "N m/rad"), ("kd_joint", "N m s/rad"),
    ("compliance_scale", "-"), ("torque_limit", "N m"),
    ("friction", "-"), ("fz_min", "N"), ("fz_max", "N"),
    ("manip_force_limit", "N"), ("swing_reg_scale", "-"),
    ("accel_limit_lin", "m/s^2"), ("accel_limit_ang", "rad/s^2"),
    ("stand_height", "m"), ("stand_height_biped", "m"),
]
_VECTOR_KEYS = [
    ("link_masses", "kg"), ("link_coms", "m"),
    ("joint_limits_low", "rad"), ("joint_limits_high", "rad"),
    ("default_joint_pos", "rad"),
    ("kp_lin", "1/s^2"), ("kd_lin", "1/s"), ("kp_ang", "1/s^2"), ("kd_ang", "1/s"),
]
_MATRIX_KEYS = [
    ("inertia", "kg m^2, 3x3"),
    ("hip_offsets", "m, one row per leg FL FR RL RR"),
    ("weight_accel", "-, 6x6"),
    ("weight_manip_force", "-, 3x3"),
    ("weight_force_reg", "-, 3x3"),
]


def save_config(cfg: RobotConfig, path) -> None:
    lines = ["# quadwbc robot configuration. SI units, body frame, legs FL FR RL RR."]
    for key, unit in _SCALAR_KEYS:
        lines.append(f"{key} {getattr(cfg, key)!r}  # {unit}")
    for key, unit in _VECTOR_KEYS:
        vals = " ".join(repr(float(v)) for v in getattr(cfg, key))
        lines.append(f"{key} {vals}  # {unit}")
    for key, unit in _MATRIX_KEYS:
        lines.append(f"{key}  # {unit}")
        for row in np.atleast_2d(getattr(cfg, key)):
            lines.append("  " + " ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_config(path) -> RobotConfig:
    scalars = {k for k, _ in _SCALAR_KEYS}
    vectors = {k for k, _ in _VECTOR_KEYS}
    matrices = {k for k, _ in _MATRIX_KEYS}
    kw: dict = {}
    pending_key = None
    pending_rows: list[list[float]] = []

    def flush():
        nonlocal pending_key, pending_rows
        if pending_key is not None:
            kw[pending_key] = np.array(pending_rows)
            pending_key, pending_rows = None, []

    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            if line.startswith(" ") or line.startswith("\t"):
                if pending_key is None:
                    raise ValueError(f"matrix row outside a matrix block: {raw!r}")
                pending_rows.append([float(tok) for tok in line.split()])
                continue
            flush()
            parts = line.split()
            key, rest = parts[0], parts[1:]
            if key in matrices:
                pending_key = key
            elif key in vectors:
                kw[key] = np.array([float(tok) for tok in rest])
            elif key in scalars:
                kw[key] = float(rest[0])
            else:
                raise ValueError(f"unknown config key {key!r}")
    flush()
    cfg = RobotConfig(**kw)
    cfg.validate()
    return cfg
