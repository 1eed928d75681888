"""Tests for the interior-point QP solver, including the brute-force
active-set enumeration oracle on small random problems."""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from hookplan.qp import INFEASIBLE, OPTIMAL, QPResult, solve_qp


def active_set_oracle(H, g, C, d, A_eq=None, b_eq=None):
    """Solve a strictly convex QP by enumerating every active set.

    Independent of the interior-point path: for each subset of the
    inequalities, solve the equality-constrained KKT system and keep the
    (unique) candidate that is primal feasible with non-negative inequality
    multipliers.
    """
    n = H.shape[0]
    m = C.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else A_eq
    b_eq = np.zeros(0) if b_eq is None else b_eq
    best = None
    for r in range(m + 1):
        for subset in itertools.combinations(range(m), r):
            Aw = np.vstack([A_eq, C[list(subset)]])
            bw = np.concatenate([b_eq, d[list(subset)]])
            K = np.block([[H, Aw.T], [Aw, np.zeros((Aw.shape[0], Aw.shape[0]))]])
            rhs = np.concatenate([-g, bw])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            mult = sol[n + A_eq.shape[0]:]
            if np.any(C @ x - d > 1e-9):
                continue
            if np.any(mult < -1e-9):
                continue
            if best is None or 0.5 * x @ H @ x + g @ x < best[1] - 1e-12:
                best = (x, 0.5 * x @ H @ x + g @ x)
    assert best is not None, "oracle found no KKT point"
    return best[0]


class TestBasics:
    def test_projection_onto_equality(self):
        # min |x|^2 s.t. x1 = 1
        res = solve_qp(np.eye(3), np.zeros(3), A_eq=np.array([[1.0, 0, 0]]),
                       b_eq=np.array([1.0]))
        assert res.status == OPTIMAL
        np.testing.assert_allclose(res.x, [1, 0, 0], atol=1e-8)

    def test_box_clips_unconstrained_minimum(self):
        # min (x-2)^2 s.t. x <= 1
        res = solve_qp(np.array([[2.0]]), np.array([-4.0]), ub=np.array([1.0]))
        assert res.status == OPTIMAL
        np.testing.assert_allclose(res.x, [1.0], atol=1e-8)

    def test_general_inequality(self):
        # min |x - (2,2)|^2 s.t. x1 + x2 <= 1
        res = solve_qp(2 * np.eye(2), np.array([-4.0, -4.0]),
                       C=np.array([[1.0, 1.0]]), d=np.array([1.0]))
        assert res.status == OPTIMAL
        np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-8)

    def test_pinned_variables(self):
        res = solve_qp(np.eye(2), np.array([1.0, 1.0]),
                       lb=np.array([0.25, -np.inf]), ub=np.array([0.25, np.inf]))
        assert res.status == OPTIMAL
        np.testing.assert_allclose(res.x, [0.25, -1.0], atol=1e-8)

    def test_sparse_inputs(self):
        H = sp.eye(4) * 2.0
        res = solve_qp(H, -np.ones(4), lb=np.zeros(4), ub=np.full(4, 0.3))
        assert res.status == OPTIMAL
        np.testing.assert_allclose(res.x, np.full(4, 0.3), atol=1e-8)

    def test_inconsistent_bounds_raise(self):
        with pytest.raises(ValueError):
            solve_qp(np.eye(1), np.zeros(1), lb=np.array([1.0]), ub=np.array([0.0]))

    def test_infeasible_equalities_detected(self):
        A = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([0.0, 1.0])
        res = solve_qp(np.eye(2), np.zeros(2), A_eq=A, b_eq=b, max_iter=80)
        assert res.status == INFEASIBLE

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            solve_qp(np.eye(2), np.zeros(3))


class TestActiveSetOracle:
    def test_random_qps_match_enumeration(self):
        """50 random strictly convex QPs (n=20, 10 inequalities):
        interior-point KKT residual below 1e-6 and solution matches the
        brute-force enumeration oracle."""
        rng = np.random.default_rng(1234)
        n, m = 20, 10
        for trial in range(50):
            M = rng.standard_normal((n, n))
            H = M @ M.T + n * np.eye(n)
            g = rng.standard_normal(n) * 2
            C = rng.standard_normal((m, n))
            x_feas = rng.standard_normal(n) * 0.3
            d = C @ x_feas + rng.uniform(0.05, 1.0, m)   # keep interior nonempty
            res = solve_qp(H, g, C=C, d=d)
            assert res.status == OPTIMAL, f"trial {trial} not optimal"
            assert res.kkt_residual < 1e-6
            x_ref = active_set_oracle(H, g, C, d)
            np.testing.assert_allclose(res.x, x_ref, atol=1e-6)

    def test_with_equalities_and_boxes(self):
        rng = np.random.default_rng(9)
        n, m = 8, 4
        for trial in range(10):
            M = rng.standard_normal((n, n))
            H = M @ M.T + n * np.eye(n)
            g = rng.standard_normal(n)
            A = rng.standard_normal((2, n))
            b = A @ (rng.standard_normal(n) * 0.1)
            lb = np.full(n, -0.6)
            ub = np.full(n, 0.6)
            res = solve_qp(H, g, A_eq=A, b_eq=b, lb=lb, ub=ub)
            assert res.status == OPTIMAL
            # oracle sees the box as general inequalities
            C = np.vstack([np.eye(n), -np.eye(n)])
            d = np.concatenate([ub, -lb])
            x_ref = active_set_oracle(H, g, C, d, A_eq=A, b_eq=b)
            np.testing.assert_allclose(res.x, x_ref, atol=1e-6)


class TestStructuredProblem:
    def test_banded_multiple_shooting_shape(self):
        """An LQ-style chain problem: x_{k+1} = A x_k + B u_k with a terminal
        pin; checks that equality duals certify stationarity."""
        rng = np.random.default_rng(3)
        N, nx, nu = 30, 4, 2
        A = np.eye(nx) + 0.05 * rng.standard_normal((nx, nx))
        B = 0.1 * rng.standard_normal((nx, nu))
        n = N * (nx + nu)

        def xi(k):
            return k * (nx + nu) + nu

        def ui(k):
            return k * (nx + nu)

        rows = []
        cols = []
        vals = []

        def put(r0, c0, M):
            for i in range(M.shape[0]):
                for j in range(M.shape[1]):
                    rows.append(r0 + i)
                    cols.append(c0 + j)
                    vals.append(M[i, j])

        x0 = rng.standard_normal(nx)
        beq = []
        r = 0
        for k in range(N):
            put(r, ui(k), B)
            put(r, xi(k), -np.eye(nx))
            if k == 0:
                beq.extend(list(-A @ x0))
            else:
                put(r, xi(k - 1), A)
                beq.extend([0.0] * nx)
            r += nx
        Aeq = sp.coo_matrix((vals, (rows, cols)), shape=(r, n)).tocsr()
        H = sp.eye(n) * 1.0
        g = np.zeros(n)
        lb = np.full(n, -2.0)
        ub = np.full(n, 2.0)
        res = solve_qp(H, g, A_eq=Aeq, b_eq=np.array(beq), lb=lb, ub=ub)
        assert res.status == OPTIMAL
        assert res.kkt_residual < 1e-7
        # dynamics satisfied
        assert np.abs(Aeq @ res.x - np.array(beq)).max() < 1e-7
