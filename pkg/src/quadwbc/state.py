"""Base + joint state container shared by the controller and the plant."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .robot import N_JOINTS, RobotConfig
from .spatial import orthonormalize


@dataclass
class SrbState:
    """Single-rigid-body state plus kinematic joint state.

    pos/vel are world frame; omega is expressed in the body frame. rot maps
    body vectors into the world frame.
    """

    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float).reshape(3)
        self.vel = np.asarray(self.vel, dtype=float).reshape(3)
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        self.joint_pos = np.asarray(self.joint_pos, dtype=float).reshape(N_JOINTS)
        self.joint_vel = np.asarray(self.joint_vel, dtype=float).reshape(N_JOINTS)

    def copy(self) -> "SrbState":
        return SrbState(self.pos.copy(), self.vel.copy(), self.rot.copy(),
                        self.omega.copy(), self.joint_pos.copy(), self.joint_vel.copy())

    def renormalize_rotation(self) -> None:
        self.rot = orthonormalize(self.rot)

    def omega_world(self) -> np.ndarray:
        return self.rot @ self.omega


def standing_state(cfg: RobotConfig, height: float | None = None) -> SrbState:
    h = cfg.stand_height if height is None else height
    joint_pos = cfg.default_joint_pos if height is None else None
    from .robot import standing_joint_pos

    q = joint_pos if joint_pos is not None else standing_joint_pos(cfg, h)
    return SrbState(pos=np.array([0.0, 0.0, h]), joint_pos=np.array(q, copy=True))
