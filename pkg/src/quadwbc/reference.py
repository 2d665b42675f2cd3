"""User commands and per-tick kinematic motion references.

The reference fills what the user leaves unspecified with the current state
or zeros: base position copies the current planar position (height comes
from the posture constant), desired joint velocities are zero, and the
desired base twist carries only (vx, vy) and the turn rate.

Stance footholds are latched in the projected frame at touchdown and
counter-advected with the commanded body motion, which keeps stance feet
station-kept without any world-frame state estimation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gait import GaitConfig, GaitState, LegMode, make_keyframes, swing_position_flagged
from .robot import (
    N_LEGS,
    LEG_SIDE,
    LegIndex,
    LegRole,
    RobotConfig,
    leg_fk,
    leg_ik_clamped,
    leg_slice,
)
from .spatial import (
    HeadingMode,
    heading_yaw,
    projected_frame,
    projected_to_world,
    rot_y,
    rot_z,
    world_to_projected,
)
from .state import SrbState


class CommandRangeError(ValueError):
    """A strict-mode command fell outside the sanctioned sampling ranges."""


# sampling/validation ranges; quadruped first value, biped second where split
COMMAND_RANGES = {
    "quadruped": dict(vx=(-0.5, 0.5), vy=(-0.5, 0.5), wz=(-0.5, 0.5),
                      ee_x=(0.1934, 0.5), ee_y=(0.0, 0.2), ee_z=(0.0, 0.4),
                      ee_force=(-30.0, 30.0)),
    "biped": dict(vx=(-0.5, 0.5), vy=(0.0, 0.0), wz=(-0.5, 0.5),
                  ee_x=(0.15, 0.30), ee_y=(0.0, 0.2), ee_z=(0.3, 0.9),
                  ee_force=(-20.0, 20.0)),
}


@dataclass
class UserCommand:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0
    # projected-frame targets keyed by manipulation leg index
    ee_pos: dict = field(default_factory=dict)
    ee_force: dict = field(default_factory=dict)
    gait: str = "trot"
    compliance: bool = False

    def copy(self) -> "UserCommand":
        return UserCommand(self.vx, self.vy, self.wz,
                           {k: np.array(v, dtype=float) for k, v in self.ee_pos.items()},
                           {k: np.array(v, dtype=float) for k, v in self.ee_force.items()},
                           self.gait, self.compliance)


def command_mode(gait_cfg: GaitConfig) -> str:
    return "biped" if gait_cfg.biped else "quadruped"


def default_command(gait_cfg: GaitConfig) -> UserCommand:
    """Zero twist with mid-range manipulation targets for the active preset."""
    ranges = COMMAND_RANGES[command_mode(gait_cfg)]
    cmd = UserCommand(gait=gait_cfg.name)
    for leg in gait_cfg.manipulation_legs():
        side = LEG_SIDE[leg]
        cmd.ee_pos[int(leg)] = np.array([
            0.5 * (ranges["ee_x"][0] + ranges["ee_x"][1]),
            side * 0.5 * (ranges["ee_y"][0] + ranges["ee_y"][1]),
            0.5 * (ranges["ee_z"][0] + ranges["ee_z"][1]),
        ])
        cmd.ee_force[int(leg)] = np.zeros(3)
    return cmd


def validate_command(cmd: UserCommand, gait_cfg: GaitConfig) -> None:
    """Raise CommandRangeError when any field is outside the allowed ranges."""
    ranges = COMMAND_RANGES[command_mode(gait_cfg)]

    def check(name, value, lo, hi):
        if not (lo - 1e-12 <= value <= hi + 1e-12):
            raise CommandRangeError(f"{name}={value:.4g} outside [{lo}, {hi}]")

    check("vx", cmd.vx, *ranges["vx"])
    check("vy", cmd.vy, *ranges["vy"])
    check("wz", cmd.wz, *ranges["wz"])
    for leg, target in cmd.ee_pos.items():
        side = LEG_SIDE[LegIndex(leg)]
        check(f"ee_pos[{leg}].x", float(target[0]), *ranges["ee_x"])
        # lateral range mirrors for right-side limbs
        lo, hi = ranges["ee_y"]
        if side > 0:
            check(f"ee_pos[{leg}].y", float(target[1]), lo, hi)
        else:
            check(f"ee_pos[{leg}].y", float(target[1]), -hi, -lo)
        check(f"ee_pos[{leg}].z", float(target[2]), *ranges["ee_z"])
    for leg, force in cmd.ee_force.items():
        for axis, value in zip("xyz", force):
            check(f"ee_force[{leg}].{axis}", float(value), *ranges["ee_force"])


def sample_command(rng: np.random.Generator, gait_cfg: GaitConfig) -> UserCommand:
    """Random command inside the sanctioned ranges for the preset."""
    ranges = COMMAND_RANGES[command_mode(gait_cfg)]

    def draw(lo, hi):
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    cmd = UserCommand(vx=draw(*ranges["vx"]), vy=draw(*ranges["vy"]),
                      wz=draw(*ranges["wz"]), gait=gait_cfg.name)
    for leg in gait_cfg.manipulation_legs():
        side = LEG_SIDE[leg]
        cmd.ee_pos[int(leg)] = np.array([
            draw(*ranges["ee_x"]),
            side * draw(*ranges["ee_y"]),
            draw(*ranges["ee_z"]),
        ])
        cmd.ee_force[int(leg)] = np.array([draw(*ranges["ee_force"]) for _ in range(3)])
    return cmd


class CommandFilter:
    """Slew limiter on the velocity commands, applied at ingestion.

    Caps the commanded planar acceleration and turn acceleration so step
    inputs cannot ask the force optimizer for infeasible accelerations. The
    realized command rates are exposed for acceleration feedforward.
    """

    def __init__(self, accel_limit: float = 1.0, turn_accel_limit: float = 2.0):
        self.accel_limit = accel_limit
        self.turn_accel_limit = turn_accel_limit
        self._vel = np.zeros(3)  # vx, vy, wz
        self.rate = np.zeros(3)  # realized d/dt of the slewed commands

    def reset(self, cmd: UserCommand | None = None) -> None:
        self._vel = np.array([cmd.vx, cmd.vy, cmd.wz]) if cmd else np.zeros(3)
        self.rate = np.zeros(3)

    def update(self, target: UserCommand, dt: float) -> UserCommand:
        want = np.array([target.vx, target.vy, target.wz])
        caps = np.array([self.accel_limit, self.accel_limit, self.turn_accel_limit])
        delta = np.clip(want - self._vel, -caps * dt, caps * dt)
        self._vel = self._vel + delta
        self.rate = delta / dt
        out = target.copy()
        out.vx, out.vy, out.wz = (float(v) for v in self._vel)
        return out


# --- foothold bookkeeping ----------------------------------------------------


def hip_pivot_body(leg: LegIndex, cfg: RobotConfig) -> np.ndarray:
    """Body-frame origin of the hip-pitch joint (footstep pivot)."""
    return cfg.hip_offsets[int(leg)] + np.array([0.0, LEG_SIDE[leg] * cfg.l_hip, 0.0])


class FootholdTracker:
    """Per-leg stance anchors and swing keyframes in the projected frame."""

    def __init__(self, robot_cfg: RobotConfig, gait_cfg: GaitConfig):
        self.robot_cfg = robot_cfg
        self.gait_cfg = gait_cfg
        self.anchors = np.zeros((N_LEGS, 3))
        self.lift_points = np.zeros((N_LEGS, 3))
        self.keyframes = [None] * N_LEGS
        self._prev_contact = np.ones(N_LEGS, dtype=bool)

    def reset(self, state: SrbState, gait_state: GaitState) -> None:
        mode = HeadingMode.BIPED if self.gait_cfg.biped else HeadingMode.QUADRUPED
        origin, rot_p = projected_frame(state.pos, state.rot, mode)
        for leg in LegIndex:
            foot_body = leg_fk(state.joint_pos[leg_slice(leg)], leg, self.robot_cfg)
            foot_world = state.pos + state.rot @ foot_body
            anchor = world_to_projected(foot_world, origin, rot_p)
            anchor[2] = 0.0
            self.anchors[int(leg)] = anchor
            self.lift_points[int(leg)] = anchor
        self.keyframes = [None] * N_LEGS
        self._prev_contact = gait_state.contact.copy()

    def update(self, state: SrbState, gait_state: GaitState, cmd: UserCommand,
               dt: float) -> None:
        cfg = self.gait_cfg
        mode = HeadingMode.BIPED if cfg.biped else HeadingMode.QUADRUPED
        origin, rot_p = projected_frame(state.pos, state.rot, mode)

        # counter-advect anchors with the commanded body motion so latched
        # footholds stay put in the world while only proprioception is used
        counter = rot_z(-cmd.wz * dt)
        shift = np.array([cmd.vx * dt, cmd.vy * dt, 0.0])
        for leg in LegIndex:
            self.anchors[int(leg)] = counter @ (self.anchors[int(leg)] - shift)
            self.anchors[int(leg), 2] = 0.0

        omega_world = state.rot @ state.omega
        for leg in LegIndex:
            i = int(leg)
            if cfg.role[i] is LegRole.MANIPULATION or cfg.mode[i] is not LegMode.GAIT:
                continue
            in_contact = bool(gait_state.contact[i])
            was_contact = bool(self._prev_contact[i])
            if was_contact and not in_contact:
                self.lift_points[i] = self.anchors[i].copy()
            hip_body = hip_pivot_body(leg, self.robot_cfg)
            hip_world = state.pos + state.rot @ hip_body
            hip_proj = world_to_projected(hip_world, origin, rot_p)
            hip_vel_world = state.vel + np.cross(omega_world, state.rot @ hip_body)
            hip_vel_proj = rot_p.T @ hip_vel_world
            if not in_contact:
                # landing target re-evaluated against the live hip state
                self.keyframes[i] = make_keyframes(
                    self.lift_points[i], hip_proj, hip_vel_proj, cfg, leg=i)
            elif not was_contact:
                kf = self.keyframes[i]
                self.anchors[i] = kf.p_land.copy() if kf is not None else hip_proj * [1, 1, 0]
                self.keyframes[i] = None
            self._prev_contact[i] = in_contact


# --- motion reference ---------------------------------------------------------


@dataclass
class MotionReference:
    """Desired generalized coordinates/velocities plus contact flags and
    manipulation forces. Position/velocity quantities are tagged by suffix:
    _proj = projected frame, _world = world frame, joints are body-local."""

    pos_proj: np.ndarray
    rot_world: np.ndarray
    joint_pos: np.ndarray
    vel_proj: np.ndarray
    angvel_proj: np.ndarray
    joint_vel: np.ndarray
    contact: np.ndarray
    ee_force_proj: dict
    heading: HeadingMode
    ee_target_proj: dict
    foot_targets_body: np.ndarray
    saturated: np.ndarray
    compliance: bool = False


def posture_targets(gait_cfg: GaitConfig, robot_cfg: RobotConfig, yaw: float):
    """Desired orientation and base height for the active posture."""
    if gait_cfg.biped:
        return rot_z(yaw) @ rot_y(-math.pi / 2.0), robot_cfg.stand_height_biped
    return rot_z(yaw), robot_cfg.stand_height


def generate_reference(cmd: UserCommand, state: SrbState, gait_state: GaitState,
                       gait_cfg: GaitConfig, footholds: FootholdTracker,
                       robot_cfg: RobotConfig) -> MotionReference:
    mode = HeadingMode.BIPED if gait_cfg.biped else HeadingMode.QUADRUPED
    origin, rot_p = projected_frame(state.pos, state.rot, mode)
    yaw = heading_yaw(state.rot, mode)
    rot_ref, height = posture_targets(gait_cfg, robot_cfg, yaw)

    joint_ref = np.zeros(12)
    foot_targets_body = np.zeros((N_LEGS, 3))
    saturated = np.zeros(N_LEGS, dtype=bool)
    ee_targets: dict = {}

    for leg in LegIndex:
        i = int(leg)
        if gait_cfg.role[i] is LegRole.MANIPULATION:
            target_proj = np.asarray(
                cmd.ee_pos.get(i, default_command(gait_cfg).ee_pos[i]), dtype=float)
        elif gait_state.contact[i] or footholds.keyframes[i] is None:
            target_proj = footholds.anchors[i]
        else:
            target_proj, clamped = swing_position_flagged(
                footholds.keyframes[i], float(gait_state.swing_progress[i]))
            saturated[i] |= clamped

        target_world = projected_to_world(target_proj, origin, rot_p)
        target_body = state.rot.T @ (target_world - state.pos)
        q_leg, clamped = leg_ik_clamped(target_body, leg, robot_cfg)
        q_low = robot_cfg.joint_limits_low[leg_slice(leg)]
        q_high = robot_cfg.joint_limits_high[leg_slice(leg)]
        q_clipped = np.clip(q_leg, q_low, q_high)
        saturated[i] |= clamped or bool(np.any(q_clipped != q_leg))
        joint_ref[leg_slice(leg)] = q_clipped
        foot_targets_body[i] = leg_fk(q_clipped, leg, robot_cfg)
        if gait_cfg.role[i] is LegRole.MANIPULATION:
            ee_targets[i] = np.asarray(target_proj, dtype=float).copy()

    forces = {int(k): np.asarray(v, dtype=float).copy()
              for k, v in cmd.ee_force.items()
              if gait_cfg.role[int(k)] is LegRole.MANIPULATION}
    for leg in gait_cfg.manipulation_legs():
        forces.setdefault(int(leg), np.zeros(3))

    return MotionReference(
        pos_proj=np.array([0.0, 0.0, height]),
        rot_world=rot_ref,
        joint_pos=joint_ref,
        vel_proj=np.array([cmd.vx, cmd.vy, 0.0]),
        angvel_proj=np.array([0.0, 0.0, cmd.wz]),
        joint_vel=np.zeros(12),
        contact=gait_state.contact.copy(),
        ee_force_proj=forces,
        heading=mode,
        ee_target_proj=ee_targets,
        foot_targets_body=foot_targets_body,
        saturated=saturated,
        compliance=cmd.compliance,
    )
