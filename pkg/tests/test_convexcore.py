import itertools
import math

import numpy as np
import pytest

from flcoex.convexcore import (
    INFEASIBLE,
    OPTIMAL,
    ConvexProgram,
    SolveOptions,
    check_derivatives,
    solve,
)


def quad_objective(Q, q):
    def f(x):
        grad = Q @ x + q
        rows, cols = np.nonzero(np.ones_like(Q))
        return float(0.5 * x @ Q @ x + q @ x), grad, (rows, cols, Q[rows, cols])
    return f


def linear_constraint(a, b):
    """a @ x - b <= 0"""
    a = np.asarray(a, dtype=float)

    def g(x):
        return float(a @ x - b), a.copy(), None
    return g


class TestToyProblems:
    def test_quadratic_with_bound(self):
        # minimize x^2 subject to x >= 1
        prog = ConvexProgram(
            n_vars=1,
            objective=quad_objective(np.array([[2.0]]), np.zeros(1)),
            lb=np.array([1.0]),
        )
        rep = solve(prog, np.array([3.0]))
        assert rep.status == OPTIMAL
        assert rep.x_opt[0] == pytest.approx(1.0, abs=1e-5)
        assert rep.objective_value == pytest.approx(1.0, abs=1e-5)

    def test_log_objective_symmetry(self):
        # minimize -log x - log y subject to x + y <= 2 -> x = y = 1
        def f(x):
            val = -math.log(x[0]) - math.log(x[1])
            grad = np.array([-1.0 / x[0], -1.0 / x[1]])
            rows = np.array([0, 1])
            cols = np.array([0, 1])
            vals = np.array([1.0 / x[0] ** 2, 1.0 / x[1] ** 2])
            return val, grad, (rows, cols, vals)

        prog = ConvexProgram(
            n_vars=2,
            objective=f,
            constraints=[linear_constraint([1.0, 1.0], 2.0)],
            lb=np.array([1e-9, 1e-9]),
        )
        rep = solve(prog, np.array([0.5, 0.3]))
        assert rep.status == OPTIMAL
        assert rep.x_opt == pytest.approx([1.0, 1.0], abs=1e-5)

    def test_equality_constrained_quadratic(self):
        # minimize x^2 + y^2 subject to x + y = 2 -> (1, 1)
        prog = ConvexProgram(
            n_vars=2,
            objective=quad_objective(2 * np.eye(2), np.zeros(2)),
            a_eq=np.array([[1.0, 1.0]]),
            b_eq=np.array([2.0]),
        )
        rep = solve(prog, np.array([1.5, 0.5]))
        assert rep.status == OPTIMAL
        assert rep.x_opt == pytest.approx([1.0, 1.0], abs=1e-6)

    def test_infeasible_reported(self):
        prog = ConvexProgram(
            n_vars=1,
            objective=quad_objective(np.array([[2.0]]), np.zeros(1)),
            constraints=[linear_constraint([1.0], -1.0)],  # x <= -1
            lb=np.array([0.0]),                            # but x >= 0
        )
        rep = solve(prog, np.array([0.5]))
        assert rep.status == INFEASIBLE

    def test_phase_one_recovers_interior_start(self):
        # start violates x + y <= 2; phase-I should find an interior point
        prog = ConvexProgram(
            n_vars=2,
            objective=quad_objective(2 * np.eye(2), np.array([-2.0, -2.0])),
            constraints=[linear_constraint([1.0, 1.0], 2.0)],
            lb=np.zeros(2),
        )
        rep = solve(prog, np.array([5.0, 5.0]))
        assert rep.status == OPTIMAL
        assert rep.x_opt == pytest.approx([1.0, 1.0], abs=1e-4)


def brute_force_qp(Q, q, G, h):
    """Active-set enumeration oracle for small QPs: min 1/2 x'Qx + q'x, Gx <= h."""
    m = G.shape[0]
    best_val, best_x = math.inf, None
    for r in range(m + 1):
        for active in itertools.combinations(range(m), r):
            A = G[list(active)]
            n = Q.shape[0]
            kkt = np.block([[Q, A.T], [A, np.zeros((r, r))]]) if r else Q
            rhs = np.concatenate([-q, h[list(active)]]) if r else -q
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(lam < -1e-9):
                continue
            if np.any(G @ x - h > 1e-9):
                continue
            val = 0.5 * x @ Q @ x + q @ x
            if val < best_val:
                best_val, best_x = val, x
    return best_val, best_x


class TestAgainstActiveSetOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_random_qp_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n, m = 5, 3
        A = rng.normal(size=(n, n))
        Q = A @ A.T + np.eye(n)
        q = rng.normal(size=n)
        G = rng.normal(size=(m, n))
        h = np.abs(rng.normal(size=m)) + 0.5  # x = 0 strictly feasible

        oracle_val, _ = brute_force_qp(Q, q, G, h)
        prog = ConvexProgram(
            n_vars=n,
            objective=quad_objective(Q, q),
            constraints=[linear_constraint(G[i], h[i]) for i in range(m)],
        )
        rep = solve(prog, np.zeros(n))
        assert rep.status == OPTIMAL
        assert rep.objective_value == pytest.approx(oracle_val, abs=1e-5, rel=1e-5)


class TestSolverProperties:
    def test_descent_from_start(self):
        rng = np.random.default_rng(11)
        n = 4
        A = rng.normal(size=(n, n))
        Q = A @ A.T + np.eye(n)
        q = rng.normal(size=n)
        prog = ConvexProgram(
            n_vars=n,
            objective=quad_objective(Q, q),
            lb=-5 * np.ones(n),
            ub=5 * np.ones(n),
        )
        x0 = np.ones(n)
        f0 = prog.objective(x0)[0]
        rep = solve(prog, x0)
        assert rep.objective_value <= f0 + 1e-12

    def test_deterministic_iterates(self):
        prog = ConvexProgram(
            n_vars=2,
            objective=quad_objective(np.array([[2.0, 0.3], [0.3, 4.0]]), np.array([1.0, -2.0])),
            constraints=[linear_constraint([1.0, 1.0], 1.0)],
            lb=np.array([-3.0, -3.0]),
        )
        r1 = solve(prog, np.array([-1.0, -1.0]))
        r2 = solve(prog, np.array([-1.0, -1.0]))
        assert np.array_equal(r1.x_opt, r2.x_opt)
        assert r1.newton_steps == r2.newton_steps

    def test_feasibility_of_returned_point(self):
        rng = np.random.default_rng(3)
        n, m = 5, 4
        A = rng.normal(size=(n, n))
        prog = ConvexProgram(
            n_vars=n,
            objective=quad_objective(A @ A.T + np.eye(n), rng.normal(size=n)),
            constraints=[
                linear_constraint(rng.normal(size=n), abs(rng.normal()) + 0.5)
                for _ in range(m)
            ],
        )
        rep = solve(prog, np.zeros(n))
        for c in prog.constraints:
            assert c(rep.x_opt)[0] <= 1e-8


class TestCheckDerivatives:
    def test_affine_exact(self):
        prog = ConvexProgram(
            n_vars=3,
            objective=lambda x: (float(x.sum()), np.ones(3), None),
            constraints=[linear_constraint([1.0, 2.0, 3.0], 4.0)],
        )
        # central differences are exact for affine functions; a big step
        # leaves only rounding noise
        assert check_derivatives(prog, np.array([0.1, 0.2, 0.3]), h=1e-2) <= 1e-12

    def test_quadratic_small_error(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(4, 4))
        prog = ConvexProgram(n_vars=4, objective=quad_objective(A @ A.T, rng.normal(size=4)))
        assert check_derivatives(prog, rng.normal(size=4), h=1e-6) <= 1e-8

    def test_rejects_nonpositive_step(self):
        prog = ConvexProgram(n_vars=1, objective=lambda x: (float(x[0]), np.ones(1), None))
        with pytest.raises(ValueError):
            check_derivatives(prog, np.zeros(1), h=0.0)
