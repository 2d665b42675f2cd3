"""Closed-loop plant: full rigid-body dynamics with massless kinematic legs.

Stance feet are pinned at world anchors and transmit exactly the reaction
implied by the commanded joint torques (gravity compensation removed),
clipped by the plant-side friction cone. Manipulation limbs brace against a
virtual object at their commanded end-effector point and transmit force the
same way, without friction clipping. Free legs integrate as viscous
massless joints.

The base integrates the full equations including the gyroscopic term the
controller's model drops. Angular momentum is the integrated quantity, so
torque-free tumbling conserves it to machine precision; mass and CoM
perturbations and an actuator delay line provide model mismatch.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .robot import (
    GRAVITY,
    N_JOINTS,
    N_LEGS,
    LegIndex,
    RobotConfig,
    leg_fk_jacobian,
    leg_gravity_torque,
    leg_ik_clamped,
    leg_slice,
)
from .spatial import exp_so3
from .state import SrbState, standing_state

PLANT_DT_MAX = 5e-3
JOINT_SPEED_LIMIT = 30.0  # rad/s cap for free (massless, viscous) joints
SINGULAR_CONDITION = 1e8

TABLE_MISMATCH_RANGES = dict(
    added_mass=(-2.0, 2.0),
    com_offset=(-0.05, 0.05),
    actuator_delay=(0.0, 0.020),
    friction=(0.5, 1.5),
)


@dataclass
class MismatchConfig:
    """Plant perturbations: extra base mass, CoM shift, actuator delay,
    plant-side friction, and a scheduled base push sequence."""

    added_mass: float = 0.0
    com_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    actuator_delay: float = 0.0
    friction: float | None = None
    pushes: list = field(default_factory=list)  # (time_s, impulse_Ns) pairs

    def __post_init__(self):
        self.com_offset = np.asarray(self.com_offset, dtype=float).reshape(3)

    def validate_strict(self) -> None:
        lo, hi = TABLE_MISMATCH_RANGES["added_mass"]
        if not lo <= self.added_mass <= hi:
            raise ValueError(f"added_mass {self.added_mass} outside [{lo}, {hi}]")
        lo, hi = TABLE_MISMATCH_RANGES["com_offset"]
        if np.any(self.com_offset < lo) or np.any(self.com_offset > hi):
            raise ValueError(f"com_offset {self.com_offset} outside [{lo}, {hi}]")
        lo, hi = TABLE_MISMATCH_RANGES["actuator_delay"]
        if not lo <= self.actuator_delay <= hi:
            raise ValueError(f"actuator_delay {self.actuator_delay} outside [{lo}, {hi}]")
        if self.friction is not None:
            lo, hi = TABLE_MISMATCH_RANGES["friction"]
            if not lo <= self.friction <= hi:
                raise ValueError(f"friction {self.friction} outside [{lo}, {hi}]")

    @classmethod
    def sample(cls, rng: np.random.Generator, push_count: int = 0,
               episode_length: float = 10.0, push_impulse: float = 3.0):
        pushes = []
        for _ in range(push_count):
            t = float(rng.uniform(0.5, max(episode_length - 0.5, 0.5)))
            direction = rng.normal(size=3)
            direction /= max(np.linalg.norm(direction), 1e-9)
            pushes.append((t, push_impulse * direction))
        return cls(
            added_mass=float(rng.uniform(*TABLE_MISMATCH_RANGES["added_mass"])),
            com_offset=rng.uniform(*TABLE_MISMATCH_RANGES["com_offset"], size=3),
            actuator_delay=float(rng.uniform(*TABLE_MISMATCH_RANGES["actuator_delay"])),
            friction=float(rng.uniform(*TABLE_MISMATCH_RANGES["friction"])),
            pushes=pushes,
        )


@dataclass
class FootContact:
    active: bool = False
    braced: bool = False               # virtual-object contact (manipulation)
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))   # world
    clipped: bool = False
    singular: bool = False


class Plant:
    """Steps the perturbed single-rigid-body world at a fixed substep."""

    def __init__(self, cfg: RobotConfig, mismatch: MismatchConfig | None = None,
                 dt: float = 1e-3, state: SrbState | None = None):
        if not 0.0 < dt <= PLANT_DT_MAX:
            raise ValueError(f"plant dt must be in (0, {PLANT_DT_MAX}]")
        self.cfg = cfg
        self.mismatch = mismatch or MismatchConfig()
        self.dt = dt
        self.state = state.copy() if state is not None else standing_state(cfg)
        self.time = 0.0
        self.contacts = [FootContact() for _ in range(N_LEGS)]
        delay_steps = int(round(self.mismatch.actuator_delay / dt))
        self._torque_queue: deque = deque(
            [np.zeros(N_JOINTS)] * delay_steps, maxlen=delay_steps + 1)
        self._total_mass = cfg.base_mass + self.mismatch.added_mass
        self._inertia_inv = np.linalg.inv(cfg.inertia)
        self._friction = (self.mismatch.friction if self.mismatch.friction is not None
                          else cfg.friction)
        self.last_accel = np.zeros(6)  # instantaneous (base lin world, omega-dot body)

    @property
    def total_mass(self) -> float:
        return self._total_mass

    def contact_forces(self) -> np.ndarray:
        return np.stack([c.force for c in self.contacts])

    def set_contact_schedule(self, contact_flags, brace_anchors: dict | None = None) -> None:
        """Apply the controller's scheduled contact set for the next tick.

        ``contact_flags`` are the per-leg scheduled flags; legs listed in
        ``brace_anchors`` (manipulation limbs) pin against a moving virtual
        anchor instead of the ground plane.
        """
        brace_anchors = brace_anchors or {}
        flags = np.asarray(contact_flags, dtype=bool).reshape(N_LEGS)
        for leg in LegIndex:
            i = int(leg)
            contact = self.contacts[i]
            if i in brace_anchors:
                contact.active = bool(flags[i])
                contact.braced = True
                contact.anchor = np.asarray(brace_anchors[i], dtype=float).copy()
                continue
            contact.braced = False
            if flags[i] and not contact.active:
                # touchdown: anchor at the foot's current ground projection
                foot, _ = leg_fk_jacobian(self.state.joint_pos[leg_slice(leg)], leg, self.cfg)
                world = self.state.pos + self.state.rot @ foot
                contact.anchor = np.array([world[0], world[1], 0.0])
            contact.active = bool(flags[i])

    def apply_push(self, impulse) -> SrbState:
        self.state.vel = self.state.vel + np.asarray(impulse, dtype=float) / self._total_mass
        return self.state

    def step(self, torques, substeps: int = 1) -> SrbState:
        for _ in range(substeps):
            self._substep(np.asarray(torques, dtype=float).reshape(N_JOINTS))
        return self.state

    def _substep(self, torque_cmd: np.ndarray) -> None:
        cfg = self.cfg
        st = self.state
        dt = self.dt

        self._torque_queue.append(torque_cmd.copy())
        tau = np.clip(self._torque_queue.popleft(), -cfg.torque_limit, cfg.torque_limit)

        g_body = st.rot.T @ np.array([0.0, 0.0, -GRAVITY])
        force_world = np.zeros(3)
        com_world = st.pos + st.rot @ self.mismatch.com_offset
        torque_world = np.zeros(3)

        new_joint_pos = st.joint_pos.copy()
        new_joint_vel = st.joint_vel.copy()

        for leg in LegIndex:
            i = int(leg)
            sl = leg_slice(leg)
            contact = self.contacts[i]
            tau_leg = tau[sl]
            if contact.active:
                q_leg = st.joint_pos[sl]
                _, J = leg_fk_jacobian(q_leg, leg, cfg)
                cond = np.linalg.cond(J)
                if cond > SINGULAR_CONDITION:
                    contact.singular = True
                    contact.force = np.zeros(3)
                else:
                    contact.singular = False
                    tau_net = tau_leg - leg_gravity_torque(q_leg, leg, cfg, g_body)
                    u_body = np.linalg.solve(J.T, tau_net)
                    u_world = st.rot @ u_body
                    contact.clipped = False
                    if not contact.braced:
                        # unilateral + pyramid clipping against the ground
                        if u_world[2] < 0.0:
                            u_world = np.zeros(3)
                            contact.clipped = True
                        else:
                            lim = self._friction * u_world[2]
                            clipped = np.clip(u_world[:2], -lim, lim)
                            if not np.array_equal(clipped, u_world[:2]):
                                contact.clipped = True
                            u_world = np.array([clipped[0], clipped[1], u_world[2]])
                    contact.force = u_world
                    force_world += u_world
                    torque_world += np.cross(contact.anchor - com_world, u_world)
            else:
                contact.force = np.zeros(3)
                contact.singular = False
                contact.clipped = False
                # massless viscous joint: damping kd carries the torque
                qd = np.clip(tau_leg / max(cfg.kd_joint, 1e-6),
                             -JOINT_SPEED_LIMIT, JOINT_SPEED_LIMIT)
                q_new = st.joint_pos[sl] + qd * dt
                q_new = np.clip(q_new, cfg.joint_limits_low[sl], cfg.joint_limits_high[sl])
                new_joint_vel[sl] = (q_new - st.joint_pos[sl]) / dt
                new_joint_pos[sl] = q_new

        # angular dynamics via world angular momentum (exactly conserved when
        # torque-free); the gyroscopic term is implicit in this formulation
        inertia = cfg.inertia
        momentum_world = st.rot @ (inertia @ st.omega)
        omega_dot = self._inertia_inv @ (st.rot.T @ torque_world
                                         - np.cross(st.omega, inertia @ st.omega))
        momentum_world = momentum_world + torque_world * dt
        omega_mid = self._inertia_inv @ (st.rot.T @ momentum_world)
        st.rot = st.rot @ exp_so3(omega_mid * dt)
        st.renormalize_rotation()
        st.omega = self._inertia_inv @ (st.rot.T @ momentum_world)

        # linear dynamics about the true (offset) CoM, mapped to the base origin
        accel_com = force_world / self._total_mass + np.array([0.0, 0.0, -GRAVITY])
        c = self.mismatch.com_offset
        if np.any(c != 0.0):
            coupling = np.cross(omega_dot, c) + np.cross(st.omega, np.cross(st.omega, c))
            accel_base = accel_com - st.rot @ coupling
        else:
            accel_base = accel_com
        st.vel = st.vel + accel_base * dt
        st.pos = st.pos + st.vel * dt
        self.last_accel = np.concatenate([accel_base, omega_dot])

        # re-pin contact legs against the new base pose
        for leg in LegIndex:
            i = int(leg)
            sl = leg_slice(leg)
            contact = self.contacts[i]
            if not contact.active:
                continue
            anchor_body = st.rot.T @ (contact.anchor - st.pos)
            q_new, _ = leg_ik_clamped(anchor_body, leg, cfg)
            new_joint_vel[sl] = (q_new - st.joint_pos[sl]) / dt
            new_joint_pos[sl] = q_new

        st.joint_pos = new_joint_pos
        st.joint_vel = new_joint_vel
        self.time += dt


def controller_predicted_accel(forces_body, foot_pos_body, cfg: RobotConfig,
                               rot) -> np.ndarray:
    """Model-side acceleration (no gyroscopic term) for consistency checks."""
    forces_body = np.asarray(forces_body, dtype=float).reshape(N_LEGS, 3)
    foot_pos_body = np.asarray(foot_pos_body, dtype=float).reshape(N_LEGS, 3)
    lin = np.asarray(rot, dtype=float).T @ np.array([0.0, 0.0, -GRAVITY])
    ang = np.zeros(3)
    inertia_inv = np.linalg.inv(cfg.inertia)
    for leg in range(N_LEGS):
        lin = lin + forces_body[leg] / cfg.base_mass
        ang = ang + inertia_inv @ np.cross(foot_pos_body[leg], forces_body[leg])
    return np.concatenate([lin, ang])
