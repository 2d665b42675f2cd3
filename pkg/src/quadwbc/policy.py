"""Observation construction, policy correction hooks and runtime metrics.

The observation is a fixed-order concatenation of proprioception, gait
signals, the kinematic joint reference, user commands and the previous
action; six consecutive steps are stacked as the policy input. A zero
policy reduces the stack to pure feedforward-plus-PD control, which is the
deployment mode when no trained weights are supplied.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .gait import GaitConfig, GaitState
from .robot import N_JOINTS, RobotConfig
from .spatial import exp_so3
from .state import SrbState

HISTORY_STEPS = 6
ACTION_DIM = 18
ACCEL_ACTION_SCALE = 5.0
JOINT_ACTION_SCALE = 0.15
POLICY_HIDDEN = (512, 256, 128)


class PolicyConfigError(ValueError):
    """Weight file inconsistent with the running observation layout."""


def observation_length(n_manipulation: int) -> int:
    return 75 + 6 * n_manipulation


def observation_vector(state: SrbState, gait_state: GaitState, gait_cfg: GaitConfig,
                       reference, command, last_action, cfg: RobotConfig) -> np.ndarray:
    """Single-step observation in the fixed published order."""
    rot_t = state.rot.T
    manip = sorted(int(leg) for leg in gait_cfg.manipulation_legs())
    mode = np.array([float(int(m)) for m in gait_cfg.mode])
    parts = [
        np.array([state.pos[2]]),
        rot_t @ np.array([0.0, 0.0, -1.0]),
        rot_t @ state.vel,
        state.omega,
        state.joint_pos - cfg.default_joint_pos,
        state.joint_vel,
        gait_state.phase,
        mode,
        reference.joint_pos - cfg.default_joint_pos,
        np.array([command.vx, command.vy, command.wz]),
    ]
    for leg in manip:
        parts.append(np.asarray(reference.ee_target_proj.get(leg, np.zeros(3)), dtype=float))
    for leg in manip:
        parts.append(np.asarray(reference.ee_force_proj.get(leg, np.zeros(3)), dtype=float))
    parts.append(np.asarray(last_action, dtype=float).reshape(ACTION_DIM))
    obs = np.concatenate(parts)
    assert obs.shape[0] == observation_length(len(manip))
    return obs


class ObservationHistory:
    """Fixed-depth stack of per-step observations, oldest first.

    The first pushed frame back-fills the whole buffer so episode starts see
    stationary statistics.
    """

    def __init__(self, steps: int = HISTORY_STEPS):
        self.steps = steps
        self._frames: list[np.ndarray] | None = None

    def reset(self) -> None:
        self._frames = None

    def push(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if self._frames is None:
            self._frames = [obs.copy() for _ in range(self.steps)]
        else:
            self._frames.pop(0)
            self._frames.append(obs.copy())
        return self.stacked()

    def stacked(self) -> np.ndarray:
        if self._frames is None:
            raise RuntimeError("history is empty")
        return np.concatenate(self._frames)


@dataclass
class ObservationNoise:
    """Uniform observation noise amplitudes (deployment default is off).

    Matches the training-time randomization ranges: orientation noise is a
    small random rotation sampled on quaternion components.
    """

    height: float = 0.02
    orientation: float = 0.05
    lin_vel: float = 0.1
    ang_vel: float = 0.15
    joint_pos: float = 0.01
    joint_vel: float = 1.5

    def apply(self, state: SrbState, rng: np.random.Generator) -> SrbState:
        noisy = state.copy()
        noisy.pos[2] += rng.uniform(-self.height, self.height)
        q_im = rng.uniform(-self.orientation, self.orientation, size=3)
        quat = np.concatenate([[1.0], q_im])
        quat /= np.linalg.norm(quat)
        angle = 2.0 * np.arccos(np.clip(quat[0], -1.0, 1.0))
        axis_norm = np.linalg.norm(quat[1:])
        rotvec = (quat[1:] / axis_norm * angle) if axis_norm > 1e-12 else np.zeros(3)
        noisy.rot = state.rot @ exp_so3(rotvec)
        noisy.vel = state.vel + rng.uniform(-self.lin_vel, self.lin_vel, size=3)
        noisy.omega = state.omega + rng.uniform(-self.ang_vel, self.ang_vel, size=3)
        noisy.joint_pos = state.joint_pos + rng.uniform(-self.joint_pos, self.joint_pos,
                                                        size=N_JOINTS)
        noisy.joint_vel = state.joint_vel + rng.uniform(-self.joint_vel, self.joint_vel,
                                                        size=N_JOINTS)
        return noisy


# --- policy network -----------------------------------------------------------


@dataclass
class MlpWeights:
    """Dense ELU network; heads: 6 base-acceleration + 12 joint corrections."""

    sizes: tuple
    weights: list = field(default_factory=list)   # per layer, (out, in)
    biases: list = field(default_factory=list)    # per layer, (out,)
    activation: str = "elu"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.sizes[-1] != ACTION_DIM:
            raise PolicyConfigError(f"output head must be {ACTION_DIM}, got {self.sizes[-1]}")
        if len(self.weights) != len(self.sizes) - 1:
            raise PolicyConfigError("weight count does not match layer sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.sizes[i + 1], self.sizes[i])
            if W.shape != want or b.shape != (self.sizes[i + 1],):
                raise PolicyConfigError(f"layer {i} shape {W.shape} != {want}")
        if self.activation != "elu":
            raise PolicyConfigError(f"unsupported activation {self.activation!r}")

    @classmethod
    def zeros(cls, input_dim: int, hidden=POLICY_HIDDEN) -> "MlpWeights":
        sizes = (input_dim, *hidden, ACTION_DIM)
        weights = [np.zeros((sizes[i + 1], sizes[i]), dtype=np.float32)
                   for i in range(len(sizes) - 1)]
        biases = [np.zeros(sizes[i + 1], dtype=np.float32) for i in range(len(sizes) - 1)]
        return cls(sizes, weights, biases)

    @classmethod
    def random(cls, input_dim: int, rng: np.random.Generator, scale: float = 0.05,
               hidden=POLICY_HIDDEN) -> "MlpWeights":
        net = cls.zeros(input_dim, hidden)
        net.weights = [rng.normal(0.0, scale, size=W.shape).astype(np.float32)
                       for W in net.weights]
        net.biases = [rng.normal(0.0, scale, size=b.shape).astype(np.float32)
                      for b in net.biases]
        return net


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(x))


def mlp_forward(net: MlpWeights, obs: np.ndarray) -> np.ndarray:
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.sizes[0]:
        raise PolicyConfigError(
            f"observation length {x.shape[0]} != network input {net.sizes[0]}")
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        x = W.astype(np.float64) @ x + b.astype(np.float64)
        if i != last:
            x = _elu(x)
    return x


@dataclass
class PolicyAction:
    """Scaled correction heads plus the raw network output (for metrics)."""

    accel_delta: np.ndarray   # 6, projected frame
    joint_delta: np.ndarray   # 12
    raw: np.ndarray           # 18, clipped to [-1, 1]

    @classmethod
    def zero(cls) -> "PolicyAction":
        return cls(np.zeros(6), np.zeros(12), np.zeros(ACTION_DIM))


def policy_correct(obs_stacked: np.ndarray, net: MlpWeights | None) -> PolicyAction:
    """Run the policy (or the zero stub) and scale the two action heads."""
    if net is None:
        return PolicyAction.zero()
    raw = np.clip(mlp_forward(net, obs_stacked), -1.0, 1.0)
    return PolicyAction(ACCEL_ACTION_SCALE * raw[:6].copy(),
                        JOINT_ACTION_SCALE * raw[6:].copy(), raw)


def apply_correction(accel_target, joint_ref, action: PolicyAction):
    """Surrogate targets: corrected acceleration and joint reference."""
    from .wbc import AccelTarget

    corrected = AccelTarget(accel_target.linear + action.accel_delta[:3],
                            accel_target.angular + action.accel_delta[3:],
                            accel_target.frame)
    return corrected, np.asarray(joint_ref, dtype=float) + action.joint_delta


# --- weight file format -------------------------------------------------------

_MAGIC = "QWBC-MLP"
_VERSION = "v1"


def save_weights(net: MlpWeights, path) -> None:
    """Flat binary blob (float32, little endian) behind a text header."""
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for W, b in zip(net.weights, net.biases) for arr in (W, b))
    header = "\n".join([
        f"{_MAGIC} {_VERSION}",
        "layers " + " ".join(str(s) for s in net.sizes),
        f"activation {net.activation}",
        "dtype float32",
        "byteorder little",
        f"checksum crc32 {zlib.crc32(blob):#010x}",
        "---",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(blob)


def load_weights(path) -> MlpWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    sep = data.find(b"---\n")
    if sep < 0:
        raise PolicyConfigError("missing header terminator")
    header_lines = data[:sep].decode("ascii").strip().splitlines()
    blob = data[sep + 4:]
    fields = dict(line.split(" ", 1) for line in header_lines[1:])
    if header_lines[0] != f"{_MAGIC} {_VERSION}":
        raise PolicyConfigError(f"unsupported weight file header {header_lines[0]!r}")
    if fields.get("byteorder") != "little" or fields.get("dtype") != "float32":
        raise PolicyConfigError("unsupported weight encoding")
    tag, value = fields["checksum"].split()
    if tag != "crc32" or int(value, 16) != zlib.crc32(blob):
        raise PolicyConfigError("weight blob checksum mismatch")
    sizes = tuple(int(tok) for tok in fields["layers"].split())
    expected = sum((sizes[i + 1] * sizes[i] + sizes[i + 1]) for i in range(len(sizes) - 1))
    if len(blob) != 4 * expected:
        raise PolicyConfigError("weight blob size does not match layer sizes")
    weights, biases = [], []
    offset = 0
    for i in range(len(sizes) - 1):
        n_w = sizes[i + 1] * sizes[i]
        W = np.frombuffer(blob, dtype="<f4", count=n_w, offset=offset)
        offset += 4 * n_w
        b = np.frombuffer(blob, dtype="<f4", count=sizes[i + 1], offset=offset)
        offset += 4 * sizes[i + 1]
        weights.append(W.reshape(sizes[i + 1], sizes[i]).copy())
        biases.append(b.copy())
    return MlpWeights(sizes, weights, biases, fields.get("activation", "elu"))


# --- runtime metric suite -----------------------------------------------------

TASK_SIGMAS = {
    "base_height": (0.1, 0.2),
    "base_orientation": (0.3, 0.6),
    "linear_velocity": (0.2, 0.3),
    "angular_velocity": (0.3, 0.4),
    "ee_position": (0.1, 0.1),
}
REG_SIGMAS = {
    "joint_acceleration": (700.0, 500.0),
    "joint_torque": (100.0, 100.0),
    "action_rate": (10.0, 10.0),
    "action_scale": (8.0, 8.0),
}


def squared_exp(error, sigma: float) -> float:
    err = np.asarray(error, dtype=float).reshape(-1)
    return float(np.exp(-float(err @ err) / (sigma * sigma)))


@dataclass
class MetricReport:
    terms: dict
    task: float
    reg: float


def evaluate_metrics(state: SrbState, reference, contact_measured, torques,
                     action: np.ndarray, prev_action: np.ndarray,
                     joint_accel: np.ndarray, ee_actual_proj: dict,
                     vel_proj: np.ndarray, angvel_z: float,
                     biped: bool = False) -> MetricReport:
    """Per-term squared-exponential tracking scores, each in [0, 1].

    ``vel_proj``/``angvel_z`` carry the measured base twist in the projected
    frame; ``ee_actual_proj`` maps manipulation legs to measured EE positions.
    """
    col = 1 if biped else 0
    gravity_body = state.rot.T @ np.array([0.0, 0.0, -1.0])
    gravity_ref = np.array([-1.0, 0.0, 0.0]) if biped else np.array([0.0, 0.0, -1.0])

    terms: dict[str, float] = {}
    terms["base_height"] = squared_exp(
        state.pos[2] - reference.pos_proj[2], TASK_SIGMAS["base_height"][col])
    terms["base_orientation"] = squared_exp(
        gravity_body - gravity_ref, TASK_SIGMAS["base_orientation"][col])
    terms["linear_velocity"] = squared_exp(
        np.asarray(vel_proj)[:2] - reference.vel_proj[:2],
        TASK_SIGMAS["linear_velocity"][col])
    terms["angular_velocity"] = squared_exp(
        angvel_z - reference.angvel_proj[2], TASK_SIGMAS["angular_velocity"][col])
    ee_err = []
    for leg, target in reference.ee_target_proj.items():
        actual = ee_actual_proj.get(leg)
        if actual is not None:
            ee_err.append(np.asarray(actual) - np.asarray(target))
    terms["ee_position"] = squared_exp(
        np.concatenate(ee_err) if ee_err else np.zeros(1) * 0.0,
        TASK_SIGMAS["ee_position"][col])

    mismatches = int(np.sum(np.asarray(reference.contact, dtype=bool)
                            != np.asarray(contact_measured, dtype=bool)))
    terms["contact_mismatch"] = 0.5 ** mismatches
    terms["joint_acceleration"] = squared_exp(joint_accel, REG_SIGMAS["joint_acceleration"][col])
    terms["joint_torque"] = squared_exp(torques, REG_SIGMAS["joint_torque"][col])
    terms["action_rate"] = squared_exp(np.asarray(action) - np.asarray(prev_action),
                                       REG_SIGMAS["action_rate"][col])
    terms["action_scale"] = squared_exp(action, REG_SIGMAS["action_scale"][col])

    task = float(np.prod([terms[k] for k in TASK_SIGMAS]))
    reg = float(np.prod([terms[k] for k in
                         ("contact_mismatch", *REG_SIGMAS.keys())]))
    return MetricReport(terms, task, reg)
