import io

import numpy as np
import pytest

from quadwbc.qp import (
    AdmmQpSolver,
    QpProblem,
    QpStatus,
    dump_problem,
    dump_problem_str,
    load_problem,
    solve,
    solve_reference,
)


def random_feasible_problem(rng, n_max=12, m_max=30):
    n = int(rng.integers(2, n_max + 1))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * n * np.eye(n)
    H = 0.5 * (H + H.T)
    g = rng.normal(size=n)
    x0 = rng.normal(size=n)  # kept feasible by construction
    n_eq = int(rng.integers(0, min(3, n)))
    m_in = int(rng.integers(1, m_max - n_eq + 1))
    A_eq = rng.normal(size=(n_eq, n)) if n_eq else None
    b_eq = A_eq @ x0 if n_eq else None
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ x0 + rng.uniform(0.05, 2.0, size=m_in)
    return QpProblem(H, g, A_eq, b_eq, A_in, b_in)


class TestAdmmBasics:
    def test_unconstrained_minimum(self):
        p = QpProblem(np.eye(2), [-1.0, -1.0])
        sol = solve(p)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-9)

    def test_halfspace_projection(self):
        p = QpProblem(np.eye(2), np.zeros(2), A_in=[[-1.0, 0.0]], b_in=[-1.0])
        sol = solve(p, tol=1e-9, max_iter=2000)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-7)

    def test_infeasible_pair_detected(self):
        # x <= 0 and x >= 1
        p = QpProblem(np.eye(1), np.zeros(1), A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
        sol = solve(p, tol=1e-6, max_iter=4000)
        assert sol.status is QpStatus.INFEASIBLE

    def test_max_iter_status(self):
        rng = np.random.default_rng(0)
        p = random_feasible_problem(rng)
        sol = solve(p, tol=1e-12, max_iter=3)
        assert sol.status is QpStatus.MAX_ITER
        assert np.all(np.isfinite(sol.x))

    def test_kkt_residuals_reported(self):
        rng = np.random.default_rng(1)
        p = random_feasible_problem(rng)
        sol = solve(p, tol=1e-8, max_iter=4000)
        assert sol.status is QpStatus.OPTIMAL
        assert sol.primal_residual <= 1e-8
        assert sol.dual_residual <= 1e-8


class TestReferenceSolver:
    def test_same_answers_as_admm_examples(self):
        p1 = QpProblem(np.eye(2), [-1.0, -1.0])
        p2 = QpProblem(np.eye(2), np.zeros(2), A_in=[[-1.0, 0.0]], b_in=[-1.0])
        for p, expect in ((p1, [1.0, 1.0]), (p2, [1.0, 0.0])):
            ref = solve_reference(p)
            adm = solve(p, tol=1e-9, max_iter=2000)
            assert ref.status is adm.status is QpStatus.OPTIMAL
            np.testing.assert_allclose(ref.x, expect, atol=1e-7)

    def test_equality_only_matches_closed_form_kkt(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(2, 10))
            M = rng.normal(size=(n, n))
            H = M @ M.T + n * np.eye(n)
            g = rng.normal(size=n)
            m = int(rng.integers(1, n))
            A = rng.normal(size=(m, n))
            b = rng.normal(size=m)
            sol = solve_reference(QpProblem(H, g, A_eq=A, b_eq=b))
            K = np.block([[H, A.T], [A, np.zeros((m, m))]])
            expect = np.linalg.solve(K, np.concatenate([-g, b]))[:n]
            np.testing.assert_allclose(sol.x, expect, atol=1e-10)

    def test_infeasible(self):
        p = QpProblem(np.eye(1), np.zeros(1), A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
        assert solve_reference(p).status is QpStatus.INFEASIBLE


class TestOracleEquivalence:
    def test_200_random_problems(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = random_feasible_problem(rng)
            adm = solve(p, tol=1e-9, max_iter=4000)
            ref = solve_reference(p)
            assert adm.status is QpStatus.OPTIMAL
            assert ref.status is QpStatus.OPTIMAL
            assert abs(adm.objective - ref.objective) <= 1e-6
            assert p.max_violation(adm.x) <= 1e-6


class TestProperties:
    def test_complementary_slackness(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            p = random_feasible_problem(rng)
            sol = solve(p, tol=1e-8, max_iter=6000)
            assert sol.status is QpStatus.OPTIMAL
            slack = p.b_in - p.A_in @ sol.x
            mult = sol.multipliers[p.n_eq:]
            assert np.max(np.abs(slack * mult), initial=0.0) <= 1e-6

    def test_scaling_invariance_of_argmin(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = random_feasible_problem(rng)
            scaled = QpProblem(37.0 * p.H, 37.0 * p.g, p.A_eq, p.b_eq, p.A_in, p.b_in)
            x1 = solve(p, tol=1e-9, max_iter=6000).x
            x2 = solve(scaled, tol=1e-9, max_iter=6000).x
            np.testing.assert_allclose(x1, x2, atol=1e-6)

    def test_warm_start_never_slower_on_repeat(self):
        rng = np.random.default_rng(6)
        solver = AdmmQpSolver(tol=1e-8, max_iter=4000)
        for _ in range(20):
            solver.reset()
            p = random_feasible_problem(rng)
            first = solver.solve(p)
            second = solver.solve(p)
            assert first.status is QpStatus.OPTIMAL
            assert second.iterations <= first.iterations

    def test_symmetry_validation(self):
        H = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError):
            QpProblem(H, np.zeros(2))


class TestDumpFormat:
    def test_roundtrip(self):
        rng = np.random.default_rng(7)
        p = random_feasible_problem(rng)
        buf = io.StringIO()
        dump_problem(p, buf)
        loaded = load_problem(io.StringIO(buf.getvalue()))
        np.testing.assert_array_equal(loaded.H, p.H)
        np.testing.assert_array_equal(loaded.g, p.g)
        np.testing.assert_array_equal(loaded.A_eq, p.A_eq)
        np.testing.assert_array_equal(loaded.A_in, p.A_in)
        np.testing.assert_array_equal(loaded.b_in, p.b_in)

    def test_roundtrip_no_constraints(self):
        p = QpProblem(np.eye(3), [1.0, 2.0, 3.0])
        loaded = load_problem(io.StringIO(dump_problem_str(p)))
        np.testing.assert_array_equal(loaded.g, p.g)
        assert loaded.n_eq == 0 and loaded.n_in == 0

    def test_file_roundtrip(self, tmp_path):
        p = QpProblem(np.eye(2), [0.5, -0.5], A_in=[[1.0, 1.0]], b_in=[1.0])
        path = tmp_path / "case.qp"
        dump_problem(p, path)
        loaded = load_problem(path)
        sol_a, sol_b = solve(p), solve(loaded)
        np.testing.assert_allclose(sol_a.x, sol_b.x, atol=0)
