"""Dense convex QP solving for small control-rate problems.

Two routes: an operator-splitting (ADMM) solver with warm starts and rho
adaptation for the 100 Hz loop, and a reference solver (exact KKT for
equality-constrained problems, interior point via cvxpy otherwise) used as
the correctness oracle in tests.

Problems are stated as min 1/2 x'Hx + g'x subject to A_eq x = b_eq and
A_in x <= b_in, with H symmetric positive definite.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H/g dimension mismatch")
        if np.max(np.abs(self.H - self.H.T)) > 1e-10:
            raise ValueError("H must be symmetric within 1e-10")
        for name in ("A_eq", "A_in"):
            A = getattr(self, name)
            b = getattr(self, name.replace("A", "b"))
            if A is None or np.size(A) == 0:
                setattr(self, name, np.zeros((0, n)))
                setattr(self, name.replace("A", "b"), np.zeros(0))
                continue
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.asarray(b, dtype=float).reshape(-1)
            if A.shape != (b.shape[0], n):
                raise ValueError(f"{name} dimension mismatch")
            setattr(self, name, A)
            setattr(self, name.replace("A", "b"), b)

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = 0.0
        if self.n_eq:
            v = max(v, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        if self.n_in:
            v = max(v, float(np.max(self.A_in @ x - self.b_in, initial=0.0)))
        return v

    def stacked_bounds(self):
        """Constraints as l <= Ax <= u (equalities first)."""
        A = np.vstack([self.A_eq, self.A_in])
        l = np.concatenate([self.b_eq, np.full(self.n_in, -np.inf)])
        u = np.concatenate([self.b_eq, self.b_in])
        return A, l, u


@dataclass
class QpSolutionRaw:
    x: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    objective: float = float("nan")


class AdmmQpSolver:
    """Operator-splitting solver with internal workspace reuse and warm starts.

    One instance per control loop; instances are single-threaded. Consecutive
    solves warm-start from the previous solution whenever the problem
    dimensions match.
    """

    def __init__(self, tol: float = 1e-6, max_iter: int = 400,
                 rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
                 rho_eq_scale: float = 1e3, adapt_interval: int = 25):
        self.tol = tol
        self.max_iter = max_iter
        self.rho0 = rho
        self.sigma = sigma
        self.alpha = alpha
        self.rho_eq_scale = rho_eq_scale
        self.adapt_interval = adapt_interval
        self._warm: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self._shape: tuple[int, int] | None = None

    def reset(self) -> None:
        self._warm = None
        self._shape = None

    def solve(self, p: QpProblem, tol: float | None = None,
              max_iter: int | None = None) -> QpSolutionRaw:
        tol = self.tol if tol is None else tol
        max_iter = self.max_iter if max_iter is None else max_iter
        n = p.n
        A, l, u = p.stacked_bounds()
        m = A.shape[0]

        if m == 0:
            x = np.linalg.solve(p.H, -p.g)
            self._warm = (x, np.zeros(0), np.zeros(0))
            self._shape = (n, 0)
            return QpSolutionRaw(x, QpStatus.OPTIMAL, 0, 0.0, 0.0,
                                 np.zeros(0), p.objective(x))

        rho = np.full(m, self.rho0)
        rho[: p.n_eq] *= self.rho_eq_scale

        if self._shape == (n, m) and self._warm is not None:
            x, y, z = (v.copy() for v in self._warm)
        else:
            x, y, z = np.zeros(n), np.zeros(m), np.zeros(m)
        # the auxiliary variable must live inside the bounds or the primal
        # residual check is meaningless
        z = np.clip(z, l, u)

        K_inv = self._factor(p.H, A, rho)
        rhs = np.empty(n + m)
        finite_u = np.isfinite(u)
        finite_l = np.isfinite(l)

        iterations = 0
        r_prim = r_dual = np.inf
        for iterations in range(max_iter + 1):
            Ax = A @ x
            r_prim = float(np.max(np.abs(Ax - z), initial=0.0))
            r_dual = float(np.max(np.abs(p.H @ x + p.g + A.T @ y), initial=0.0))
            if r_prim <= tol and r_dual <= tol:
                self._warm = (x.copy(), y.copy(), z.copy())
                self._shape = (n, m)
                return QpSolutionRaw(x, QpStatus.OPTIMAL, iterations, r_prim, r_dual,
                                     y.copy(), p.objective(x))
            if iterations == max_iter:
                break

            if iterations > 0 and iterations % self.adapt_interval == 0:
                scale_p = max(float(np.max(np.abs(Ax), initial=0.0)),
                              float(np.max(np.abs(z), initial=0.0)), 1e-12)
                scale_d = max(float(np.max(np.abs(p.H @ x), initial=0.0)),
                              float(np.max(np.abs(A.T @ y), initial=0.0)),
                              float(np.max(np.abs(p.g), initial=0.0)), 1e-12)
                ratio = np.sqrt((r_prim / scale_p) / max(r_dual / scale_d, 1e-16))
                ratio = float(np.clip(ratio, 1e-4, 1e4))
                if ratio > 5.0 or ratio < 0.2:
                    rho = np.clip(rho * ratio, 1e-6, 1e6)
                    K_inv = self._factor(p.H, A, rho)

            rhs[:n] = self.sigma * x - p.g
            rhs[n:] = z - y / rho
            xv = K_inv @ rhs
            x_tilde, nu = xv[:n], xv[n:]
            z_tilde = z + (nu - y) / rho

            x = self.alpha * x_tilde + (1.0 - self.alpha) * x
            z_relaxed = self.alpha * z_tilde + (1.0 - self.alpha) * z
            z_new = np.clip(z_relaxed + y / rho, l, u)
            dy = rho * (z_relaxed - z_new)
            y = y + dy
            z = z_new

            if self._primal_infeasibility_certificate(A, l, u, finite_l, finite_u, dy, tol):
                return QpSolutionRaw(x, QpStatus.INFEASIBLE, iterations + 1,
                                     r_prim, r_dual, y.copy(), p.objective(x))

        self._warm = (x.copy(), y.copy(), z.copy())
        self._shape = (n, m)
        return QpSolutionRaw(x, QpStatus.MAX_ITER, iterations, r_prim, r_dual,
                             y.copy(), p.objective(x))

    def _factor(self, H, A, rho):
        n, m = H.shape[0], A.shape[0]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H + self.sigma * np.eye(n)
        K[:n, n:] = A.T
        K[n:, :n] = A
        K[n:, n:] = -np.diag(1.0 / rho)
        return np.linalg.inv(K)

    @staticmethod
    def _primal_infeasibility_certificate(A, l, u, finite_l, finite_u, dy, tol) -> bool:
        norm_dy = float(np.max(np.abs(dy), initial=0.0))
        if norm_dy <= 1e-12:
            return False
        eps = tol * norm_dy
        if float(np.max(np.abs(A.T @ dy), initial=0.0)) > eps:
            return False
        dy_pos = np.maximum(dy, 0.0)
        dy_neg = np.minimum(dy, 0.0)
        # rows with an infinite bound cannot support a certificate component
        if np.any(dy_pos[~finite_u] > eps) or np.any(-dy_neg[~finite_l] > eps):
            return False
        support = float(u[finite_u] @ dy_pos[finite_u] + l[finite_l] @ dy_neg[finite_l])
        return support < -eps


def solve(p: QpProblem, tol: float = 1e-6, max_iter: int = 400) -> QpSolutionRaw:
    """One-shot ADMM solve without warm-start history."""
    return AdmmQpSolver(tol=tol, max_iter=max_iter).solve(p)


def solve_reference(p: QpProblem) -> QpSolutionRaw:
    """Correctness-over-speed oracle solver.

    Equality-only problems go through the exact KKT linear system; anything
    with inequalities is handed to an interior-point solver (cvxpy).
    """
    n = p.n
    if p.n_in == 0:
        if p.n_eq == 0:
            x = np.linalg.solve(p.H, -p.g)
            return QpSolutionRaw(x, QpStatus.OPTIMAL, 1, 0.0, 0.0,
                                 np.zeros(0), p.objective(x))
        m = p.n_eq
        K = np.zeros((n + m, n + m))
        K[:n, :n] = p.H
        K[:n, n:] = p.A_eq.T
        K[n:, :n] = p.A_eq
        try:
            sol = np.linalg.solve(K, np.concatenate([-p.g, p.b_eq]))
        except np.linalg.LinAlgError:
            return QpSolutionRaw(np.zeros(n), QpStatus.INFEASIBLE, 0,
                                 np.inf, np.inf, np.zeros(m))
        x, y = sol[:n], sol[n:]
        r_prim = float(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0))
        return QpSolutionRaw(x, QpStatus.OPTIMAL, 1, r_prim, 0.0, y, p.objective(x))

    import cvxpy as cp

    x = cp.Variable(n)
    constraints = []
    if p.n_eq:
        constraints.append(p.A_eq @ x == p.b_eq)
    constraints.append(p.A_in @ x <= p.b_in)
    objective = cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(p.H)) + p.g @ x)
    problem = cp.Problem(objective, constraints)
    try:
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12,
                      tol_feas=1e-12)
    except cp.error.SolverError:
        problem.solve(solver=cp.SCS, eps=1e-9)

    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return QpSolutionRaw(np.zeros(n), QpStatus.INFEASIBLE, 0, np.inf, np.inf,
                             np.zeros(p.n_eq + p.n_in))
    if x.value is None:
        return QpSolutionRaw(np.zeros(n), QpStatus.MAX_ITER, 0, np.inf, np.inf,
                             np.zeros(p.n_eq + p.n_in))
    xv = np.asarray(x.value, dtype=float).reshape(n)
    duals = [np.atleast_1d(np.asarray(c.dual_value, dtype=float)) for c in constraints]
    y = np.concatenate(duals) if duals else np.zeros(0)
    r_prim = p.max_violation(xv)
    r_dual = float(np.max(np.abs(p.H @ xv + p.g
                                 + np.vstack([p.A_eq, p.A_in]).T @ y), initial=0.0))
    return QpSolutionRaw(xv, QpStatus.OPTIMAL, int(problem.solver_stats.num_iters or 0),
                         r_prim, r_dual, y, p.objective(xv))


# --- plain-text problem dumps -------------------------------------------------


def dump_problem(p: QpProblem, path_or_file) -> None:
    """Write a replayable plain-text matrix dump of a problem."""

    def emit(fh):
        fh.write("# qp problem dump v1\n")
        fh.write(f"n {p.n} n_eq {p.n_eq} n_in {p.n_in}\n")
        for name, arr in (("H", p.H), ("g", p.g.reshape(1, -1)),
                          ("A_eq", p.A_eq), ("b_eq", p.b_eq.reshape(1, -1)),
                          ("A_in", p.A_in), ("b_in", p.b_in.reshape(1, -1))):
            rows = np.atleast_2d(arr) if arr.size else np.zeros((0, 0))
            fh.write(f"{name} {rows.shape[0]}\n")
            for row in rows:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w") as fh:
            emit(fh)


def load_problem(path_or_file) -> QpProblem:
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    header = lines[0].split()
    n, n_eq, n_in = int(header[1]), int(header[3]), int(header[5])
    data: dict[str, np.ndarray] = {}
    i = 1
    for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
        tag, count = lines[i].split()
        assert tag == name, f"expected section {name}, got {lines[i]!r}"
        i += 1
        block = []
        for _ in range(int(count)):
            block.append([float(tok) for tok in lines[i].split()])
            i += 1
        data[name] = np.array(block, dtype=float)
    g = data["g"].reshape(-1)
    A_eq = data["A_eq"].reshape(-1, n)[:n_eq] if n_eq else None
    b_eq = data["b_eq"].reshape(-1)[:n_eq] if n_eq else None
    A_in = data["A_in"].reshape(-1, n)[:n_in] if n_in else None
    b_in = data["b_in"].reshape(-1)[:n_in] if n_in else None
    return QpProblem(data["H"], g, A_eq, b_eq, A_in, b_in)


def dump_problem_str(p: QpProblem) -> str:
    buf = io.StringIO()
    dump_problem(p, buf)
    return buf.getvalue()
