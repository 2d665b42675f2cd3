"""Reaction-force optimization and joint torque composition.

Pipeline per control tick: a base-acceleration PD target is computed in the
projected frame, corrected by the policy, transformed to the body frame and
traded against manipulation force commands in a small dense QP over the
per-limb reaction forces. Solved forces map to feedforward joint torques
through the leg Jacobians; gravity compensation and joint PD complete the
command.

Sign convention for the orientation term: the error log(R^T Rhat) points
from the current orientation toward the reference, so positive gains drive
the base back to the target (consistent with the linear term).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qp import AdmmQpSolver, QpProblem, QpSolutionRaw, QpStatus
from .robot import GRAVITY, N_LEGS, LegIndex, LegRole, RobotConfig, leg_slice
from .spatial import FrameTag, HeadingMode, log_so3, projected_frame, skew
from .state import SrbState


@dataclass
class AccelTarget:
    """Desired 6-D base acceleration, tagged with the frame it lives in."""

    linear: np.ndarray
    angular: np.ndarray
    frame: FrameTag = FrameTag.PROJECTED

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


def accel_pd(reference, state: SrbState, cfg: RobotConfig,
             lin_feedforward=None, ang_feedforward=None) -> AccelTarget:
    """Projected-frame acceleration target from base pose/twist errors.

    Optional feedforward terms (e.g. the realized command slew rate) add to
    the PD output before saturation.
    """
    origin, rot_p = projected_frame(state.pos, state.rot, reference.heading)

    pos_proj = np.array([0.0, 0.0, state.pos[2]])
    vel_proj = rot_p.T @ state.vel
    lin = cfg.kp_lin * (reference.pos_proj - pos_proj) \
        + cfg.kd_lin * (reference.vel_proj - vel_proj)
    if lin_feedforward is not None:
        lin = lin + lin_feedforward

    rot_err_body = log_so3(state.rot.T @ reference.rot_world)
    rot_err_proj = (rot_p.T @ state.rot) @ rot_err_body
    omega_proj = rot_p.T @ (state.rot @ state.omega)
    ang = cfg.kp_ang * rot_err_proj + cfg.kd_ang * (reference.angvel_proj - omega_proj)
    if ang_feedforward is not None:
        ang = ang + ang_feedforward

    lin = np.clip(lin, -cfg.accel_limit_lin, cfg.accel_limit_lin)
    ang = np.clip(ang, -cfg.accel_limit_ang, cfg.accel_limit_ang)
    return AccelTarget(lin, ang, FrameTag.PROJECTED)


def accel_to_body(target: AccelTarget, state: SrbState,
                  heading: HeadingMode) -> np.ndarray:
    """Rotate a projected-frame acceleration target into the body frame."""
    if target.frame is FrameTag.BODY:
        return target.stacked()
    _, rot_p = projected_frame(state.pos, state.rot, heading)
    to_body = state.rot.T @ rot_p
    return np.concatenate([to_body @ target.linear, to_body @ target.angular])


@dataclass
class WbcInput:
    """Everything the force QP needs, already expressed in the body frame."""

    accel_body: np.ndarray            # surrogate 6-D target
    foot_pos_body: np.ndarray         # (4, 3) contact positions r_i
    contact: np.ndarray               # (4,) flags (manipulation always true)
    roles: tuple                      # per-leg LegRole
    manip_force_body: dict            # desired forces for manipulation legs
    gravity_body: np.ndarray          # R^T (0, 0, -g)

    def __post_init__(self):
        self.accel_body = np.asarray(self.accel_body, dtype=float).reshape(6)
        self.foot_pos_body = np.asarray(self.foot_pos_body, dtype=float).reshape(N_LEGS, 3)
        self.contact = np.asarray(self.contact, dtype=bool).reshape(N_LEGS)
        self.gravity_body = np.asarray(self.gravity_body, dtype=float).reshape(3)
        if not np.any(self.contact):
            raise ValueError("force QP needs at least one stance or manipulation contact")
        if not np.all(np.isfinite(self.foot_pos_body)):
            raise ValueError("non-finite contact positions")


@dataclass
class AssembledQp:
    problem: QpProblem
    constant: float          # objective offset dropped by the QP form
    dynamics: np.ndarray     # (6, 12) force-to-acceleration map
    gravity6: np.ndarray     # (6,) gravity contribution to the acceleration


def build_wbc_input(reference, state: SrbState, accel_body, cfg: RobotConfig,
                    roles) -> WbcInput:
    from .robot import all_leg_fk

    _, rot_p = projected_frame(state.pos, state.rot, reference.heading)
    to_body = state.rot.T @ rot_p
    manip_body = {int(leg): to_body @ np.asarray(f, dtype=float)
                  for leg, f in reference.ee_force_proj.items()}
    return WbcInput(
        accel_body=accel_body,
        foot_pos_body=all_leg_fk(state.joint_pos, cfg),
        contact=reference.contact,
        roles=tuple(roles),
        manip_force_body=manip_body,
        gravity_body=state.rot.T @ np.array([0.0, 0.0, -GRAVITY]),
    )


def assemble_qp(inp: WbcInput, cfg: RobotConfig) -> AssembledQp:
    """Stack the force-QP objective and the contact constraint set.

    Decision variables are the four stacked body-frame reaction forces.
    Swing locomotion legs are pinned to zero vertical force and heavily
    regularized laterally; friction and vertical bounds apply to stance
    locomotion legs only.
    """
    n = 3 * N_LEGS
    inertia_inv = np.linalg.inv(cfg.inertia)
    A_dyn = np.zeros((6, n))
    for leg in range(N_LEGS):
        cols = slice(3 * leg, 3 * leg + 3)
        A_dyn[:3, cols] = np.eye(3) / cfg.base_mass
        A_dyn[3:, cols] = inertia_inv @ skew(inp.foot_pos_body[leg])
    gravity6 = np.concatenate([inp.gravity_body, np.zeros(3)])
    b = inp.accel_body - gravity6

    U = cfg.weight_accel
    H = 2.0 * (A_dyn.T @ U @ A_dyn)
    g = -2.0 * (A_dyn.T @ U @ b)
    constant = float(b @ U @ b)

    eq_rows, eq_vals, in_rows, in_vals = [], [], [], []
    for leg in range(N_LEGS):
        cols = slice(3 * leg, 3 * leg + 3)
        role = inp.roles[leg]
        if role is LegRole.MANIPULATION:
            V = cfg.weight_manip_force
            want = np.asarray(inp.manip_force_body.get(leg, np.zeros(3)), dtype=float)
            H[cols, cols] += 2.0 * V
            g[3 * leg:3 * leg + 3] += -2.0 * (V @ want)
            constant += float(want @ V @ want)
            continue
        W = cfg.weight_force_reg
        if not inp.contact[leg]:
            W = W * cfg.swing_reg_scale
            row = np.zeros(n)
            row[3 * leg + 2] = 1.0
            eq_rows.append(row)
            eq_vals.append(0.0)
        else:
            mu = cfg.friction
            for sign in (1.0, -1.0):
                for axis in (0, 1):
                    row = np.zeros(n)
                    row[3 * leg + axis] = sign
                    row[3 * leg + 2] = -mu
                    in_rows.append(row)
                    in_vals.append(0.0)
            row = np.zeros(n)
            row[3 * leg + 2] = 1.0
            in_rows.append(row)
            in_vals.append(cfg.fz_max)
            row = np.zeros(n)
            row[3 * leg + 2] = -1.0
            in_rows.append(row)
            in_vals.append(-cfg.fz_min)
        H[cols, cols] += 2.0 * W

    problem = QpProblem(
        0.5 * (H + H.T), g,
        np.array(eq_rows) if eq_rows else None,
        np.array(eq_vals) if eq_vals else None,
        np.array(in_rows) if in_rows else None,
        np.array(in_vals) if in_vals else None,
    )
    return AssembledQp(problem, constant, A_dyn, gravity6)


def objective_value(inp: WbcInput, cfg: RobotConfig, forces) -> float:
    """Force-QP cost computed directly from its definition (test oracle hook)."""
    forces = np.asarray(forces, dtype=float).reshape(N_LEGS, 3)
    accel = achieved_acceleration(inp, cfg, forces)
    delta_a = inp.accel_body - accel
    total = float(delta_a @ cfg.weight_accel @ delta_a)
    for leg in range(N_LEGS):
        if inp.roles[leg] is LegRole.MANIPULATION:
            du = np.asarray(inp.manip_force_body.get(leg, np.zeros(3))) - forces[leg]
            total += float(du @ cfg.weight_manip_force @ du)
        else:
            W = cfg.weight_force_reg
            if not inp.contact[leg]:
                W = W * cfg.swing_reg_scale
            total += float(forces[leg] @ W @ forces[leg])
    return total


def achieved_acceleration(inp: WbcInput, cfg: RobotConfig, forces) -> np.ndarray:
    forces = np.asarray(forces, dtype=float).reshape(N_LEGS, 3)
    inertia_inv = np.linalg.inv(cfg.inertia)
    accel = np.concatenate([inp.gravity_body, np.zeros(3)])
    for leg in range(N_LEGS):
        accel[:3] += forces[leg] / cfg.base_mass
        accel[3:] += inertia_inv @ np.cross(inp.foot_pos_body[leg], forces[leg])
    return accel


@dataclass
class QpSolution:
    """Per-limb body-frame reaction forces plus solver diagnostics."""

    forces: np.ndarray          # (4, 3)
    accel_body: np.ndarray      # achieved 6-D acceleration
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    fallback: bool = False      # last good solution reused
    force_clamped: bool = False
    raw: QpSolutionRaw | None = None


class WholeBodyController:
    """Owns the warm-started solver and the last-good-solution fallback."""

    def __init__(self, cfg: RobotConfig, tol: float = 1e-7, max_iter: int = 400):
        self.cfg = cfg
        self.solver = AdmmQpSolver(tol=tol, max_iter=max_iter)
        self._last_forces: np.ndarray | None = None
        self._last_contact: np.ndarray | None = None

    def reset(self) -> None:
        self.solver.reset()
        self._last_forces = None
        self._last_contact = None

    def solve(self, inp: WbcInput) -> QpSolution:
        assembled = assemble_qp(inp, self.cfg)
        raw = self.solver.solve(assembled.problem)
        forces = raw.x.reshape(N_LEGS, 3).copy()
        fallback = False
        if raw.status is QpStatus.OPTIMAL:
            self._last_forces = forces.copy()
            self._last_contact = inp.contact.copy()
        else:
            usable = self._last_forces is not None and np.array_equal(
                self._last_contact, inp.contact)
            if usable:
                forces = self._last_forces.copy()
                fallback = True
            elif not np.all(np.isfinite(forces)):
                forces = np.zeros((N_LEGS, 3))
                fallback = True

        clamped = False
        limit = self.cfg.manip_force_limit
        for leg in range(N_LEGS):
            if inp.roles[leg] is LegRole.MANIPULATION:
                clipped = np.clip(forces[leg], -limit, limit)
                clamped |= bool(np.any(clipped != forces[leg]))
                forces[leg] = clipped

        accel = achieved_acceleration(inp, self.cfg, forces)
        return QpSolution(forces, accel, raw.status, raw.iterations,
                          raw.primal_residual, raw.dual_residual,
                          fallback=fallback, force_clamped=clamped, raw=raw)


def feedforward_torque(forces, jacobians) -> np.ndarray:
    """tau = J_i^T u_i distributed to each leg's joints."""
    forces = np.asarray(forces, dtype=float).reshape(N_LEGS, 3)
    jacobians = np.asarray(jacobians, dtype=float).reshape(N_LEGS, 3, 3)
    tau = np.empty(12)
    for leg in range(N_LEGS):
        tau[3 * leg:3 * leg + 3] = jacobians[leg].T @ forces[leg]
    return tau


def compose_torque(tau_ff, tau_gc, joint_ref, joint_pos, joint_vel_ref, joint_vel,
                   cfg: RobotConfig, compliance: bool = False,
                   manipulation_legs=()) -> np.ndarray:
    """Final command: feedforward + gravity + joint PD, clamped to limits.

    Compliance mode scales the PD gains down on the manipulation legs only.
    """
    kp = np.full(12, cfg.kp_joint)
    kd = np.full(12, cfg.kd_joint)
    if compliance:
        for leg in manipulation_legs:
            kp[leg_slice(LegIndex(leg))] *= cfg.compliance_scale
            kd[leg_slice(LegIndex(leg))] *= cfg.compliance_scale
    tau = (np.asarray(tau_ff, dtype=float) + np.asarray(tau_gc, dtype=float)
           + kp * (np.asarray(joint_ref, dtype=float) - np.asarray(joint_pos, dtype=float))
           + kd * (np.asarray(joint_vel_ref, dtype=float) - np.asarray(joint_vel, dtype=float)))
    return np.clip(tau, -cfg.torque_limit, cfg.torque_limit)
