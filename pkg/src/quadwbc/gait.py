"""Periodic gait scheduling and swing-foot trajectory synthesis.

Per-limb mode encoding: swing = -1, gait = 0, stance = +1. Gait-mode legs
follow the duty/offset schedule; stance-mode legs are always in contact;
swing-mode legs never schedule ground contact. Manipulation-role legs report
contact 1 regardless of mode so the force optimizer accounts for them.

Swing curves are two C1-joined cubic Bezier segments (lift -> mid -> land)
with zero vertical velocity at both ends and at the junction, so the apex
equals the configured clearance exactly at mid-swing.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .robot import N_LEGS, LegIndex, LegRole


class LegMode(enum.IntEnum):
    SWING = -1
    GAIT = 0
    STANCE = 1


@dataclass
class GaitConfig:
    name: str = "trot"
    period: float = 0.6                      # s
    duty: np.ndarray = field(default_factory=lambda: np.full(N_LEGS, 0.5))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(N_LEGS))
    mode: tuple = (LegMode.GAIT,) * N_LEGS
    role: tuple = (LegRole.LOCOMOTION,) * N_LEGS
    clearance: float = 0.08                  # swing apex height, m
    biped: bool = False                      # upright posture + biped heading

    def __post_init__(self):
        self.duty = np.asarray(self.duty, dtype=float).reshape(N_LEGS)
        self.offset = np.asarray(self.offset, dtype=float).reshape(N_LEGS)
        if self.period <= 0:
            raise ValueError("gait period must be positive")
        if np.any((self.duty <= 0) | (self.duty >= 1)):
            raise ValueError("duty factors must lie in (0, 1)")
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")

    def stance_duration(self, leg: int) -> float:
        return float(self.duty[int(leg)] * self.period)

    def manipulation_legs(self) -> list[LegIndex]:
        return [LegIndex(i) for i in range(N_LEGS) if self.role[i] is LegRole.MANIPULATION]

    def locomotion_legs(self) -> list[LegIndex]:
        return [LegIndex(i) for i in range(N_LEGS) if self.role[i] is LegRole.LOCOMOTION]


@dataclass
class GaitState:
    clock: float
    phase: np.ndarray           # per-leg, in [-1, 1]; 0.0 for non-gait legs
    contact: np.ndarray         # per-leg bool, the scheduled contact flag
    swing_progress: np.ndarray  # per-leg, 0 at lift-off, 1 at touchdown

    def copy(self) -> "GaitState":
        return GaitState(self.clock, self.phase.copy(), self.contact.copy(),
                         self.swing_progress.copy())


def _schedule(clock: float, cfg: GaitConfig) -> GaitState:
    phase = np.zeros(N_LEGS)
    contact = np.zeros(N_LEGS, dtype=bool)
    progress = np.zeros(N_LEGS)
    for i in range(N_LEGS):
        mode = cfg.mode[i]
        if mode is LegMode.GAIT:
            cycle = (clock / cfg.period + cfg.offset[i]) % 1.0
            phase[i] = 2.0 * cycle - 1.0
            in_stance = cycle < cfg.duty[i]
            contact[i] = in_stance
            if not in_stance:
                progress[i] = (cycle - cfg.duty[i]) / (1.0 - cfg.duty[i])
        elif mode is LegMode.STANCE:
            contact[i] = True
        # LegMode.SWING: no scheduled ground contact
        if cfg.role[i] is LegRole.MANIPULATION:
            contact[i] = True
    return GaitState(clock, phase, contact, progress)


def initial_gait_state(cfg: GaitConfig) -> GaitState:
    return _schedule(0.0, cfg)


def advance_gait(state: GaitState, dt: float, cfg: GaitConfig) -> GaitState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return _schedule(state.clock + dt, cfg)


# --- swing trajectories -------------------------------------------------------


@dataclass
class SwingKeyframes:
    """Lift, mid and landing keyframes in the projected frame.

    Lift and land sit on the ground plane (z = 0); mid carries the clearance.
    """

    p_lift: np.ndarray
    p_mid: np.ndarray
    p_land: np.ndarray

    def __post_init__(self):
        self.p_lift = np.asarray(self.p_lift, dtype=float).reshape(3)
        self.p_mid = np.asarray(self.p_mid, dtype=float).reshape(3)
        self.p_land = np.asarray(self.p_land, dtype=float).reshape(3)


def make_keyframes(lift_pos, hip_pos, hip_vel, cfg: GaitConfig, leg: int = 0) -> SwingKeyframes:
    """Keyframes from the lift-off point and the hip state, projected frame.

    The landing point leads the hip by half the stance duration times the
    hip velocity; mid is the hip ground projection raised to the clearance.
    """
    lift = np.asarray(lift_pos, dtype=float).reshape(3).copy()
    hip = np.asarray(hip_pos, dtype=float).reshape(3)
    vel = np.asarray(hip_vel, dtype=float).reshape(3)
    lift[2] = 0.0
    mid = np.array([hip[0], hip[1], cfg.clearance])
    land = hip + 0.5 * cfg.stance_duration(leg) * vel
    land[2] = 0.0
    return SwingKeyframes(lift, mid, land)


def _bezier(c0, c1, c2, c3, t: float) -> np.ndarray:
    mt = 1.0 - t
    return (mt * mt * mt) * c0 + 3.0 * (mt * mt * t) * c1 + 3.0 * (mt * t * t) * c2 + (t * t * t) * c3


def _segments(kf: SwingKeyframes):
    # shared junction tangent: a quarter of the lift->land chord, horizontal
    tangent = 0.25 * (kf.p_land - kf.p_lift)
    tangent[2] = 0.0
    c2a = kf.p_mid - tangent
    c2a[2] = kf.p_mid[2]
    c1b = kf.p_mid + tangent
    c1b[2] = kf.p_mid[2]
    seg1 = (kf.p_lift, kf.p_lift, c2a, kf.p_mid)
    seg2 = (kf.p_mid, c1b, kf.p_land, kf.p_land)
    return seg1, seg2


def swing_position_flagged(kf: SwingKeyframes, s: float):
    """Swing-foot position at progress s plus a flag set when s was clamped."""
    clamped = s < 0.0 or s > 1.0
    s = min(max(s, 0.0), 1.0)
    seg1, seg2 = _segments(kf)
    if s <= 0.5:
        pos = _bezier(*seg1, 2.0 * s)
    else:
        pos = _bezier(*seg2, 2.0 * s - 1.0)
    return pos, clamped


def swing_position(kf: SwingKeyframes, s: float) -> np.ndarray:
    """Swing-foot position at progress s in [0, 1] (clamped outside)."""
    return swing_position_flagged(kf, s)[0]


GAIT_PRESETS = {
    # diagonal pairs, all four legs on the ground half the time
    "trot": dict(
        period=0.6, duty=[0.5] * 4, offset=[0.0, 0.5, 0.5, 0.0],
        mode=(LegMode.GAIT,) * 4, role=(LegRole.LOCOMOTION,) * 4,
        clearance=0.08, biped=False),
    # front-left limb manipulates, the other three crawl
    "tripod-fl": dict(
        period=0.75, duty=[0.75] * 4, offset=[0.0, 0.0, 2.0 / 3.0, 1.0 / 3.0],
        mode=(LegMode.SWING, LegMode.GAIT, LegMode.GAIT, LegMode.GAIT),
        role=(LegRole.MANIPULATION,) + (LegRole.LOCOMOTION,) * 3,
        clearance=0.06, biped=False),
    # upright walking on the hind legs, front limbs manipulate
    "biped": dict(
        period=0.7, duty=[0.65] * 4, offset=[0.0, 0.0, 0.0, 0.5],
        mode=(LegMode.SWING, LegMode.SWING, LegMode.GAIT, LegMode.GAIT),
        role=(LegRole.MANIPULATION, LegRole.MANIPULATION,
              LegRole.LOCOMOTION, LegRole.LOCOMOTION),
        clearance=0.06, biped=True),
    # all feet planted
    "stand": dict(
        period=0.6, duty=[0.5] * 4, offset=[0.0] * 4,
        mode=(LegMode.STANCE,) * 4, role=(LegRole.LOCOMOTION,) * 4,
        clearance=0.08, biped=False),
    # standing with the front-left limb free for manipulation
    "stand-fl": dict(
        period=0.6, duty=[0.5] * 4, offset=[0.0] * 4,
        mode=(LegMode.SWING, LegMode.STANCE, LegMode.STANCE, LegMode.STANCE),
        role=(LegRole.MANIPULATION,) + (LegRole.LOCOMOTION,) * 3,
        clearance=0.08, biped=False),
}


def gait_preset(name: str) -> GaitConfig:
    try:
        kw = GAIT_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown gait preset {name!r}; have {sorted(GAIT_PRESETS)}") from None
    return GaitConfig(name=name, **kw)
