import numpy as np
import pytest

from quadwbc.gait import gait_preset, initial_gait_state
from quadwbc.policy import (
    ACTION_DIM,
    MetricReport,
    MlpWeights,
    ObservationHistory,
    ObservationNoise,
    PolicyAction,
    PolicyConfigError,
    apply_correction,
    evaluate_metrics,
    load_weights,
    mlp_forward,
    observation_length,
    observation_vector,
    policy_correct,
    save_weights,
    squared_exp,
)
from quadwbc.reference import FootholdTracker, default_command, generate_reference
from quadwbc.robot import RobotConfig
from quadwbc.state import standing_state
from quadwbc.wbc import AccelTarget


@pytest.fixture(scope="module")
def cfg():
    return RobotConfig()


def make_context(cfg, preset):
    gait_cfg = gait_preset(preset)
    height = cfg.stand_height_biped if gait_cfg.biped else cfg.stand_height
    state = standing_state(cfg, height=height)
    if gait_cfg.biped:
        from quadwbc.spatial import rot_y
        import math
        state.rot = rot_y(-math.pi / 2)
    gait_state = initial_gait_state(gait_cfg)
    tracker = FootholdTracker(cfg, gait_cfg)
    tracker.reset(state, gait_state)
    cmd = default_command(gait_cfg)
    ref = generate_reference(cmd, state, gait_state, gait_cfg, tracker, cfg)
    return state, gait_state, gait_cfg, cmd, ref


class TestObservation:
    def test_quadruped_lengths(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        obs = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                                 np.zeros(ACTION_DIM), cfg)
        assert obs.shape == (81,)
        assert observation_length(1) == 81
        hist = ObservationHistory()
        stacked = hist.push(obs)
        assert stacked.shape == (486,)

    def test_biped_lengths(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "biped")
        obs = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                                 np.zeros(ACTION_DIM), cfg)
        assert obs.shape == (87,)
        hist = ObservationHistory()
        assert hist.push(obs).shape == (522,)

    def test_history_prefill_by_repetition(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        obs = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                                 np.zeros(ACTION_DIM), cfg)
        hist = ObservationHistory()
        stacked = hist.push(obs)
        for k in range(6):
            np.testing.assert_array_equal(stacked[k * 81:(k + 1) * 81], obs)

    def test_history_shifts(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        obs0 = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                                  np.zeros(ACTION_DIM), cfg)
        obs1 = obs0 + 1.0
        hist = ObservationHistory()
        hist.push(obs0)
        stacked = hist.push(obs1)
        np.testing.assert_array_equal(stacked[:81], obs0)
        np.testing.assert_array_equal(stacked[-81:], obs1)

    def test_pure_function(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        a = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                               np.zeros(ACTION_DIM), cfg)
        b = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                               np.zeros(ACTION_DIM), cfg)
        np.testing.assert_array_equal(a, b)

    def test_known_leading_entries(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        obs = observation_vector(state, gait_state, gait_cfg, ref, cmd,
                                 np.zeros(ACTION_DIM), cfg)
        assert obs[0] == state.pos[2]
        np.testing.assert_allclose(obs[1:4], [0.0, 0.0, -1.0], atol=1e-12)

    def test_noise_deterministic_given_seed(self, cfg):
        state, *_ = make_context(cfg, "tripod-fl")
        noise = ObservationNoise()
        a = noise.apply(state, np.random.default_rng(3))
        b = noise.apply(state, np.random.default_rng(3))
        np.testing.assert_array_equal(a.vel, b.vel)
        np.testing.assert_array_equal(a.rot, b.rot)
        assert not np.array_equal(a.vel, state.vel)
        # rotation stays valid
        np.testing.assert_allclose(a.rot.T @ a.rot, np.eye(3), atol=1e-12)


class TestPolicy:
    def test_zero_policy_identity(self, cfg):
        action = policy_correct(np.zeros(486), None)
        np.testing.assert_array_equal(action.accel_delta, np.zeros(6))
        np.testing.assert_array_equal(action.joint_delta, np.zeros(12))
        target = AccelTarget(np.ones(3), np.ones(3))
        corrected, q = apply_correction(target, np.arange(12.0), action)
        np.testing.assert_array_equal(corrected.linear, target.linear)
        np.testing.assert_array_equal(q, np.arange(12.0))

    def test_all_zero_weights(self):
        net = MlpWeights.zeros(486)
        action = policy_correct(np.random.default_rng(0).normal(size=486), net)
        np.testing.assert_array_equal(action.raw, np.zeros(18))

    def test_matches_layer_by_layer_oracle(self):
        rng = np.random.default_rng(1)
        net = MlpWeights.random(81, rng, hidden=(16, 8))
        x = rng.normal(size=81)
        # independent evaluation
        h = x.copy()
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            h = W.astype(float) @ h + b.astype(float)
            if i < len(net.weights) - 1:
                h = np.where(h > 0, h, np.exp(h) - 1.0)
        np.testing.assert_allclose(mlp_forward(net, x), h, atol=1e-6)

    def test_action_scaling_and_bounds(self):
        rng = np.random.default_rng(2)
        net = MlpWeights.random(81, rng, scale=5.0, hidden=(8,))  # drive outputs past +-1
        action = policy_correct(rng.normal(size=81), net)
        assert np.max(np.abs(action.raw)) <= 1.0
        assert np.max(np.abs(action.accel_delta)) <= 5.0
        assert np.max(np.abs(action.joint_delta)) <= 0.15
        np.testing.assert_allclose(action.accel_delta, 5.0 * action.raw[:6], atol=0)
        np.testing.assert_allclose(action.joint_delta, 0.15 * action.raw[6:], atol=0)

    def test_dimension_mismatch_raises(self):
        net = MlpWeights.zeros(486)
        with pytest.raises(PolicyConfigError):
            mlp_forward(net, np.zeros(522))


class TestWeightFiles:
    def test_byte_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        net = MlpWeights.random(486, rng)
        path = tmp_path / "policy.qwbc"
        save_weights(net, path)
        loaded = load_weights(path)
        assert loaded.sizes == net.sizes
        for W1, W2 in zip(net.weights, loaded.weights):
            assert np.array_equal(W1, W2)
        for b1, b2 in zip(net.biases, loaded.biases):
            assert np.array_equal(b1, b2)
        # identical forward pass
        x = rng.normal(size=486)
        np.testing.assert_array_equal(mlp_forward(net, x), mlp_forward(loaded, x))

    def test_checksum_guard(self, tmp_path):
        net = MlpWeights.zeros(81, hidden=(8,))
        path = tmp_path / "p.qwbc"
        save_weights(net, path)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(PolicyConfigError):
            load_weights(path)

    def test_bad_output_head_rejected(self):
        with pytest.raises(PolicyConfigError):
            MlpWeights((81, 16, 17), [np.zeros((16, 81)), np.zeros((17, 16))],
                       [np.zeros(16), np.zeros(17)])


class TestMetrics:
    def make_report(self, cfg, **overrides):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        kw = dict(
            state=state, reference=ref, contact_measured=ref.contact,
            torques=np.zeros(12), action=np.zeros(18), prev_action=np.zeros(18),
            joint_accel=np.zeros(12),
            ee_actual_proj={k: np.array(v) for k, v in ref.ee_target_proj.items()},
            vel_proj=np.zeros(3), angvel_z=0.0, biped=False)
        kw.update(overrides)
        return evaluate_metrics(**kw)

    def test_zero_error_gives_ones(self, cfg):
        report = self.make_report(cfg)
        for name, value in report.terms.items():
            assert value == pytest.approx(1.0, abs=1e-12), name
        assert report.task == pytest.approx(1.0, abs=1e-12)
        assert report.reg == pytest.approx(1.0, abs=1e-12)

    def test_height_exemplar(self, cfg):
        # 5 cm height error with sigma 0.1: exp(-0.25) = 0.7788
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        state.pos[2] = ref.pos_proj[2] - 0.05
        report = self.make_report(cfg, state=state, reference=ref)
        assert report.terms["base_height"] == pytest.approx(np.exp(-0.25), abs=1e-10)
        assert report.terms["base_height"] == pytest.approx(0.7788, abs=1e-4)

    def test_contact_mismatch_quarter(self, cfg):
        state, gait_state, gait_cfg, cmd, ref = make_context(cfg, "tripod-fl")
        measured = np.asarray(ref.contact, dtype=bool).copy()
        measured[:2] = ~measured[:2]
        report = self.make_report(cfg, contact_measured=measured)
        assert report.terms["contact_mismatch"] == pytest.approx(0.25, abs=0)

    def test_terms_within_unit_interval_and_monotone(self, cfg):
        values = [squared_exp(np.array([e]), 0.2) for e in (0.0, 0.1, 0.2, 0.5, 1.0)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_products_in_unit_interval(self, cfg):
        report = self.make_report(cfg, torques=np.full(12, 30.0),
                                  action=np.full(18, 0.5),
                                  vel_proj=np.array([0.3, -0.2, 0.0]))
        assert 0.0 <= report.task <= 1.0
        assert 0.0 <= report.reg <= 1.0
