import numpy as np
import pytest

from quadwbc.plant import (
    MismatchConfig,
    Plant,
    controller_predicted_accel,
    TABLE_MISMATCH_RANGES,
)
from quadwbc.robot import (
    GRAVITY,
    LegIndex,
    RobotConfig,
    all_leg_fk,
    all_leg_jacobians,
    gravity_compensation,
    leg_slice,
    nominal_footholds,
)
from quadwbc.state import SrbState, standing_state
from quadwbc.wbc import feedforward_torque


@pytest.fixture(scope="module")
def cfg():
    return RobotConfig()


def standing_plant(cfg, mismatch=None, dt=1e-3):
    plant = Plant(cfg, mismatch=mismatch, dt=dt)
    plant.set_contact_schedule(np.ones(4, dtype=bool))
    return plant


def standing_torques(cfg, state, forces_body=None):
    if forces_body is None:
        forces_body = np.tile([0.0, 0.0, cfg.base_mass * GRAVITY / 4.0], (4, 1))
    tau_ff = feedforward_torque(forces_body, all_leg_jacobians(state.joint_pos, cfg))
    tau_gc = gravity_compensation(state.joint_pos, state.rot, cfg)
    return tau_ff + tau_gc


class TestFreeFall:
    def test_velocity_decrement_exact(self, cfg):
        plant = Plant(cfg)  # no contacts scheduled
        v0 = plant.state.vel[2]
        plant.step(np.zeros(12))
        assert abs(plant.state.vel[2] - (v0 - GRAVITY * plant.dt)) < 1e-12

    def test_position_integrates_velocity(self, cfg):
        plant = Plant(cfg)
        z0 = plant.state.pos[2]
        plant.step(np.zeros(12))
        assert abs(plant.state.pos[2] - (z0 - GRAVITY * plant.dt**2)) < 1e-12


class TestTumbling:
    def test_angular_momentum_conserved(self, cfg):
        plant = Plant(cfg, dt=1e-3)
        plant.state.omega = np.array([0.3, 0.2, 2.0])
        L0 = plant.state.rot @ (cfg.inertia @ plant.state.omega)
        plant.step(np.zeros(12), substeps=1000)  # 1 s of torque-free tumbling
        L1 = plant.state.rot @ (cfg.inertia @ plant.state.omega)
        assert np.max(np.abs(L1 - L0)) < 1e-6

    def test_matches_fine_step_oracle(self, cfg):
        # same tumble integrated at dt=1e-5 as the trajectory oracle
        def run(dt, steps):
            plant = Plant(cfg, dt=dt)
            plant.state.omega = np.array([0.3, 0.2, 2.0])
            plant.step(np.zeros(12), substeps=steps)
            return plant.state

        coarse = run(1e-3, 1000)
        fine = run(1e-5, 100_000)
        np.testing.assert_allclose(coarse.omega, fine.omega, atol=1e-2)
        np.testing.assert_allclose(coarse.rot, fine.rot, atol=2e-2)

    def test_rotation_stays_orthonormal(self, cfg):
        plant = Plant(cfg)
        plant.state.omega = np.array([3.0, -2.0, 1.0])
        plant.step(np.zeros(12), substeps=2000)
        R = plant.state.rot
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)


class TestStanding:
    def test_force_balance_zero_acceleration(self, cfg):
        plant = standing_plant(cfg)
        tau = standing_torques(cfg, plant.state)
        plant.step(tau)
        assert np.max(np.abs(plant.state.vel)) < 1e-8
        assert np.max(np.abs(plant.state.omega)) < 1e-8

    def test_transmitted_forces_recovered_exactly(self, cfg):
        plant = standing_plant(cfg)
        expect = np.array([0.0, 0.0, cfg.base_mass * GRAVITY / 4.0])
        tau = standing_torques(cfg, plant.state)
        plant.step(tau)
        for contact in plant.contacts:
            np.testing.assert_allclose(contact.force, expect, atol=1e-9)

    def test_never_tensile(self, cfg):
        plant = standing_plant(cfg)
        # command a strong upward pull on all feet
        forces = np.tile([0.0, 0.0, -30.0], (4, 1))
        tau = standing_torques(cfg, plant.state, forces)
        plant.step(tau)
        for contact in plant.contacts:
            assert contact.force[2] >= 0.0
            assert contact.clipped

    def test_friction_clipping(self, cfg):
        plant = standing_plant(cfg)
        forces = np.tile([60.0, 0.0, 36.0], (4, 1))  # far outside the cone
        tau = standing_torques(cfg, plant.state, forces)
        plant.step(tau)
        mu = cfg.friction
        for contact in plant.contacts:
            assert abs(contact.force[0]) <= mu * contact.force[2] + 1e-12
            assert contact.clipped


class TestModelConsistency:
    def test_controller_predicted_acceleration(self, cfg):
        rng = np.random.default_rng(0)
        for _ in range(20):
            plant = standing_plant(cfg)
            state = plant.state.copy()
            # random stance forces inside the friction cone
            fz = rng.uniform(20.0, 60.0, size=4)
            fxy = rng.uniform(-0.4, 0.4, size=(4, 2)) * fz[:, None]
            forces = np.column_stack([fxy, fz])
            tau = standing_torques(cfg, state, forces)
            v0 = state.vel.copy()
            plant.step(tau)
            predicted = controller_predicted_accel(
                forces, all_leg_fk(state.joint_pos, cfg), cfg, state.rot)
            # predicted is body-frame at identity rotation = world here;
            # the plant's instantaneous acceleration must match Eq.-of-motion
            # evaluated with the transmitted forces (omega = 0, no gyro term)
            np.testing.assert_allclose(plant.last_accel, predicted, atol=1e-6)
            # integration sanity: velocity moved the right way
            np.testing.assert_allclose(
                (plant.state.vel - v0) / plant.dt, predicted[:3], atol=1e-3)


class TestPush:
    def test_impulse_arithmetic(self, cfg):
        plant = Plant(cfg)
        plant.apply_push([1.5, 0.0, 0.0])
        assert abs(plant.state.vel[0] - 0.1) < 1e-12

    def test_zero_impulse_identity(self, cfg):
        plant = Plant(cfg)
        v0 = plant.state.vel.copy()
        plant.apply_push(np.zeros(3))
        np.testing.assert_array_equal(plant.state.vel, v0)

    def test_opposite_impulses_cancel(self, cfg):
        plant = Plant(cfg)
        plant.apply_push([0.7, -0.2, 0.1])
        plant.apply_push([-0.7, 0.2, -0.1])
        np.testing.assert_allclose(plant.state.vel, np.zeros(3), atol=1e-15)

    def test_added_mass_scales_response(self, cfg):
        plant = Plant(cfg, mismatch=MismatchConfig(added_mass=2.0))
        plant.apply_push([1.7, 0.0, 0.0])
        assert abs(plant.state.vel[0] - 0.1) < 1e-12


class TestActuatorDelay:
    def test_effect_arrives_after_delay(self, cfg):
        delay = 0.005
        plant = Plant(cfg, mismatch=MismatchConfig(actuator_delay=delay))
        tau = np.zeros(12)
        tau[0] = 1.0  # FL abduction, free leg
        moved_at = None
        q0 = plant.state.joint_pos[0]
        for k in range(12):
            plant.step(tau)
            if moved_at is None and plant.state.joint_pos[0] != q0:
                moved_at = k
        assert moved_at == int(round(delay / plant.dt))

    def test_zero_delay_immediate(self, cfg):
        plant = Plant(cfg)
        tau = np.zeros(12)
        tau[0] = 1.0
        q0 = plant.state.joint_pos[0]
        plant.step(tau)
        assert plant.state.joint_pos[0] != q0


class TestMismatch:
    def test_strict_validation(self):
        MismatchConfig(added_mass=2.0, com_offset=[0.05, 0, 0],
                       actuator_delay=0.02, friction=1.5).validate_strict()
        with pytest.raises(ValueError):
            MismatchConfig(added_mass=3.0).validate_strict()
        with pytest.raises(ValueError):
            MismatchConfig(com_offset=[0.1, 0, 0]).validate_strict()
        with pytest.raises(ValueError):
            MismatchConfig(actuator_delay=0.05).validate_strict()
        with pytest.raises(ValueError):
            MismatchConfig(friction=0.2).validate_strict()

    def test_sampling_within_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            m = MismatchConfig.sample(rng, push_count=2)
            m.validate_strict()
            assert len(m.pushes) == 2

    def test_com_offset_induces_tilt_torque(self, cfg):
        plant = standing_plant(cfg, mismatch=MismatchConfig(com_offset=[0.05, 0.0, 0.0]))
        tau = standing_torques(cfg, plant.state)
        plant.step(tau, substeps=50)
        assert np.linalg.norm(plant.state.omega) > 1e-4  # unmodeled pitch torque

    def test_heavier_base_sags(self, cfg):
        plant = standing_plant(cfg, mismatch=MismatchConfig(added_mass=2.0))
        tau = standing_torques(cfg, plant.state)  # balances the nominal mass only
        plant.step(tau, substeps=20)
        assert plant.state.vel[2] < -1e-4


class TestDeterminism:
    def test_bit_identical_runs(self, cfg):
        def run():
            plant = standing_plant(cfg, mismatch=MismatchConfig(
                added_mass=1.0, com_offset=[0.02, -0.01, 0.0], actuator_delay=0.01))
            tau = standing_torques(cfg, plant.state)
            for k in range(200):
                plant.step(tau + 0.01 * np.sin(k) * np.ones(12))
            return plant.state

        a, b = run(), run()
        assert np.array_equal(a.pos, b.pos)
        assert np.array_equal(a.rot, b.rot)
        assert np.array_equal(a.joint_pos, b.joint_pos)


class TestBracedManipulation:
    def test_braced_leg_transmits_commanded_force(self, cfg):
        plant = Plant(cfg)
        # FL braced at a raised point; the other three carry the base
        state = plant.state
        anchor = state.pos + state.rot @ np.array([0.3, 0.15, -0.1])
        want = np.array([5.0, -3.0, -8.0])
        forces = np.tile([0.0, 0.0, 0.0], (4, 1))
        forces[0] = want
        # keep the base balanced through the stance legs
        forces[1:] = [0.0, 1.0, (cfg.base_mass * GRAVITY + 8.0) / 3.0]
        forces[1:, 0] = -5.0 / 3.0
        forces[1:, 1] = 3.0 / 3.0
        # place the FL joints at the brace point up front so no preparation
        # step (and hence no base drift) is needed
        from quadwbc.robot import leg_ik_clamped

        anchor_body = state.rot.T @ (anchor - state.pos)
        q_fl, saturated = leg_ik_clamped(anchor_body, LegIndex.FL, cfg)
        assert not saturated
        plant.state.joint_pos[leg_slice(LegIndex.FL)] = q_fl
        plant.set_contact_schedule(np.ones(4, dtype=bool), {0: anchor})
        tau = standing_torques(cfg, plant.state, forces)
        plant.step(tau)
        np.testing.assert_allclose(plant.contacts[0].force, want, atol=1e-6)
        assert plant.contacts[0].braced
        assert not plant.contacts[0].clipped  # no friction clip on braces

    def test_free_leg_respects_joint_limits(self, cfg):
        plant = Plant(cfg)
        tau = np.zeros(12)
        tau[2] = -10.0  # drive the FL knee hard toward its lower bound
        plant.step(tau, substeps=500)
        assert plant.state.joint_pos[2] >= cfg.joint_limits_low[2] - 1e-12
