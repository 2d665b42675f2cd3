import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from quadwbc import spatial
from quadwbc.spatial import (
    DegenerateHeadingError,
    HeadingMode,
    exp_so3,
    log_so3,
    projected_frame,
    rot_x,
    rot_y,
    rot_z,
    skew,
    vee,
)


def random_rotations(n, seed=0):
    return ScipyRotation.random(n, random_state=seed).as_matrix()


class TestSkewVee:
    def test_skew_zero(self):
        assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))

    def test_skew_cross_identity(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([4.0, 5.0, 6.0])
        np.testing.assert_allclose(skew(a) @ b, [-3.0, 6.0, -3.0], atol=1e-14)
        np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-14)

    def test_skew_antisymmetric(self):
        S = skew([0.1, -0.2, 0.3])
        np.testing.assert_allclose(S.T, -S, atol=0)

    def test_vee_zero(self):
        assert np.array_equal(vee(np.zeros((3, 3))), np.zeros(3))

    def test_vee_inverts_skew(self):
        a = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(vee(skew(a)), a, atol=0)

    def test_vee_rejects_symmetric(self):
        with pytest.raises(ValueError):
            vee(np.eye(3))

    def test_skew_vee_roundtrip_on_antisymmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            S = skew(rng.normal(size=3))
            np.testing.assert_allclose(skew(vee(S)), S, atol=0)


class TestLogSo3:
    def test_identity(self):
        assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))

    def test_z_quarter_turn(self):
        np.testing.assert_allclose(log_so3(rot_z(math.pi / 2)), [0, 0, math.pi / 2], atol=1e-12)

    def test_near_pi_about_x(self):
        # oracle: scipy's quaternion-based rotvec conversion
        angle = math.pi - 1e-7
        R = rot_x(angle)
        v = log_so3(R)
        assert abs(np.linalg.norm(v) - angle) < 1e-6
        np.testing.assert_allclose(v, ScipyRotation.from_matrix(R).as_rotvec(), atol=1e-6)

    def test_exact_pi(self):
        for axis in (rot_x, rot_y, rot_z):
            v = log_so3(axis(math.pi))
            assert abs(np.linalg.norm(v) - math.pi) < 1e-9
            np.testing.assert_allclose(exp_so3(v), axis(math.pi), atol=1e-8)

    def test_roundtrip_10k_random(self):
        Rs = random_rotations(10_000, seed=7)
        worst = 0.0
        for R in Rs:
            err = np.max(np.abs(exp_so3(skew_to_vec_roundtrip(R)) - R))
            worst = max(worst, err)
        assert worst < 1e-8

    def test_magnitude_bounded_by_pi(self):
        for R in random_rotations(500, seed=3):
            assert np.linalg.norm(log_so3(R)) <= math.pi + 1e-12

    def test_matches_quaternion_oracle(self):
        for R in random_rotations(500, seed=11):
            np.testing.assert_allclose(
                log_so3(R), ScipyRotation.from_matrix(R).as_rotvec(), atol=1e-9
            )


def skew_to_vec_roundtrip(R):
    return log_so3(R)


class TestExpSo3:
    def test_small_angle_orthonormal(self):
        R = exp_so3([1e-12, -1e-12, 1e-13])
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)

    def test_matches_scipy(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            v = rng.normal(size=3)
            np.testing.assert_allclose(
                exp_so3(v), ScipyRotation.from_rotvec(v).as_matrix(), atol=1e-12
            )


class TestProjectedFrame:
    def test_identity_pose(self):
        origin, R_p = projected_frame([1.0, 2.0, 0.3], np.eye(3), HeadingMode.QUADRUPED)
        np.testing.assert_allclose(origin, [1.0, 2.0, 0.0], atol=0)
        np.testing.assert_allclose(R_p, np.eye(3), atol=1e-15)

    def test_yawed_pitched_pose(self):
        # oracle: normalize-and-project the body x axis by hand
        R = rot_z(math.pi / 2) @ rot_y(math.radians(10.0))
        origin, R_p = projected_frame(np.zeros(3), R, HeadingMode.QUADRUPED)
        body_x = R[:, 0]
        expect = np.array([body_x[0], body_x[1], 0.0])
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(R_p[:, 0], expect, atol=1e-9)
        np.testing.assert_allclose(R_p[:, 0], [0.0, 1.0, 0.0], atol=1e-9)

    def test_biped_upright(self):
        # base pitched -90 deg: body x points up, body -z points forward
        R = rot_y(-math.pi / 2)
        origin, R_p = projected_frame([0.0, 0.0, 0.45], R, HeadingMode.BIPED)
        fwd = -R[:, 2]
        expect = np.array([fwd[0], fwd[1], 0.0])
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(R_p[:, 0], expect, atol=1e-12)

    def test_quadruped_vertical_heading_degenerate(self):
        with pytest.raises(DegenerateHeadingError):
            projected_frame(np.zeros(3), rot_y(-math.pi / 2), HeadingMode.QUADRUPED)

    def test_orthonormal_output(self):
        for R in random_rotations(200, seed=13):
            try:
                _, R_p = projected_frame(np.zeros(3), R, HeadingMode.QUADRUPED)
            except DegenerateHeadingError:
                continue
            np.testing.assert_allclose(R_p.T @ R_p, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R_p) - 1.0) < 1e-12
            np.testing.assert_allclose(R_p[:, 2], [0, 0, 1], atol=0)

    def test_idempotent(self):
        for R in random_rotations(100, seed=17):
            try:
                origin, R_p = projected_frame([0.3, -0.2, 0.5], R, HeadingMode.QUADRUPED)
            except DegenerateHeadingError:
                continue
            origin2, R_p2 = projected_frame(origin, R_p, HeadingMode.QUADRUPED)
            np.testing.assert_allclose(origin2, origin, atol=1e-15)
            np.testing.assert_allclose(R_p2, R_p, atol=1e-12)


class TestFrameTransforms:
    def test_world_projected_roundtrip(self):
        rng = np.random.default_rng(23)
        for R in random_rotations(50, seed=29):
            origin, R_p = projected_frame(rng.normal(size=3), R, HeadingMode.QUADRUPED)
            v = rng.normal(size=3)
            back = spatial.projected_to_world(
                spatial.world_to_projected(v, origin, R_p), origin, R_p
            )
            np.testing.assert_allclose(back, v, atol=1e-12)
