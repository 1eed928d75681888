"""Tests for the rigid-body manipulator model."""

import numpy as np
import pytest

from hookplan import model as mdl
from hookplan.model import ManipulatorParams, SingularStateError

PARAMS = ManipulatorParams()


def random_state(rng, scale=0.4):
    xi = rng.uniform(-scale, scale, 16)
    xi[2] += 1.5
    # keep well inside the non-singular domain
    xi[7] = np.clip(xi[7], -0.4, 0.4)
    xi[12] = np.clip(xi[12], -0.5, 0.5)
    xi[13] = np.clip(xi[13], -0.5, 0.5)
    return xi


def random_input(rng):
    u = rng.uniform(-0.2, 0.2, 4)
    u[0] = rng.uniform(3.0, 9.0)
    return u


class TestParams:
    def test_defaults_match_hardware_table(self):
        p = ManipulatorParams()
        assert p.m == 0.605 and p.m_hook == 0.01
        np.testing.assert_allclose(p.J, [1.5e-3, 1.45e-3, 2.66e-3])
        assert p.L == 0.4 and p.b == 0.29

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            ManipulatorParams(m=-1.0)
        with pytest.raises(ValueError):
            ManipulatorParams(J=np.array([1e-3, -1e-3, 1e-3]))
        with pytest.raises(ValueError):
            ManipulatorParams(delta_b=0.5)   # >= nominal b

    def test_perturbed_extremes_stay_positive(self):
        p = ManipulatorParams()
        for d in ([1, 1, 1], [-1, -1, -1]):
            q = p.perturbed(np.array(d))
            assert np.all(q.J > 0) and q.b > 0


class TestHookDirection:
    def test_straight_down(self):
        np.testing.assert_allclose(mdl.hook_direction(0.0, 0.0), [0, 0, -1], atol=1e-15)

    def test_alpha_half_pi(self):
        np.testing.assert_allclose(mdl.hook_direction(np.pi / 2, 0.0), [0, 1, 0], atol=1e-15)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.uniform(-np.pi, np.pi, 2)
            q = mdl.hook_direction(a, b)
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        q = mdl.hook_direction(0.1, 0.2)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12

    def test_rates_zero(self):
        np.testing.assert_allclose(
            mdl.hook_direction_rates(0.0, 0.0, 0.0, 0.0), np.zeros(3), atol=1e-15)

    def test_rates_orthogonal_to_direction(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b, da, db = rng.uniform(-2, 2, 4)
            q = mdl.hook_direction(a, b)
            dq = mdl.hook_direction_rates(a, b, da, db)
            assert abs(q @ dq) < 1e-12

    def test_rates_match_finite_difference(self):
        a, b, da, db = 0.3, -0.2, 0.5, 0.1
        dq = mdl.hook_direction_rates(a, b, da, db)
        eps = 1e-7
        fd = (mdl.hook_direction(a + eps * da, b + eps * db)
              - mdl.hook_direction(a - eps * da, b - eps * db)) / (2 * eps)
        np.testing.assert_allclose(dq, fd, atol=1e-6)

    def test_accel_matches_finite_difference(self):
        a, b, da, db, dda, ddb = 0.2, 0.4, -0.3, 0.6, 0.7, -0.5
        ddq = mdl.hook_direction_accel(a, b, da, db, dda, ddb)
        eps = 1e-5
        qm = mdl.hook_direction(a - eps * da + 0.5 * eps**2 * dda,
                                b - eps * db + 0.5 * eps**2 * ddb)
        q0 = mdl.hook_direction(a, b)
        qp = mdl.hook_direction(a + eps * da + 0.5 * eps**2 * dda,
                                b + eps * db + 0.5 * eps**2 * ddb)
        fd = (qp - 2 * q0 + qm) / eps**2
        np.testing.assert_allclose(ddq, fd, atol=1e-4)


class TestKinematics:
    def test_hanging_hook_position(self):
        xi = np.zeros(16)
        xi[2] = 1.0
        r_l, v_l = mdl.payload_kinematics(xi, PARAMS)
        np.testing.assert_allclose(r_l, [0, 0, 0.6], atol=1e-15)
        np.testing.assert_allclose(v_l, np.zeros(3), atol=1e-15)

    def test_rigid_translation(self):
        xi = np.zeros(16)
        xi[3] = 1.0
        _, v_l = mdl.payload_kinematics(xi, PARAMS)
        np.testing.assert_allclose(v_l, [1, 0, 0], atol=1e-15)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            xi = random_state(rng)
            back = mdl.plan_to_drone(mdl.drone_to_plan(xi, PARAMS), PARAMS)
            np.testing.assert_allclose(back, xi, atol=1e-12)


class TestRotation:
    def test_identity_at_zero(self):
        np.testing.assert_allclose(mdl.attitude_to_rotation(np.zeros(3)), np.eye(3), atol=1e-15)

    def test_pure_yaw_maps_e1_to_e2(self):
        R = mdl.attitude_to_rotation(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R @ np.array([1, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_orthonormal(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            lam = rng.uniform(-1.2, 1.2, 3)
            R = mdl.attitude_to_rotation(lam)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12


class TestEulerRateTransform:
    def test_identity_at_zero(self):
        np.testing.assert_allclose(mdl.euler_rate_transform(np.zeros(3)), np.eye(3), atol=1e-15)

    def test_gimbal_lock_rejected(self):
        with pytest.raises(SingularStateError):
            mdl.euler_rate_transform(np.array([0.0, np.pi / 2, 0.0]))

    def test_consistent_with_rotation_kinematics(self):
        # R_dot = R skew(omega) with omega = Q lam_dot
        rng = np.random.default_rng(4)
        for _ in range(20):
            lam = rng.uniform(-0.8, 0.8, 3)
            lam_dot = rng.uniform(-1, 1, 3)
            Q = mdl.euler_rate_transform(lam)
            om = Q @ lam_dot
            eps = 1e-7
            Rp = mdl.attitude_to_rotation(lam + eps * lam_dot)
            Rm = mdl.attitude_to_rotation(lam - eps * lam_dot)
            R_dot_fd = (Rp - Rm) / (2 * eps)
            R = mdl.attitude_to_rotation(lam)
            skew = np.array([[0, -om[2], om[1]], [om[2], 0, -om[0]], [-om[1], om[0], 0]])
            np.testing.assert_allclose(R_dot_fd, R @ skew, atol=1e-6)


class TestDynamics:
    def test_hover_equilibrium(self):
        p = PARAMS
        xi = np.zeros(16)
        xi[:3] = [0.3, -1.2, 1.7]
        f_hover = (p.m + p.m_hook) * p.g
        assert abs(f_hover - 6.033) < 1e-3   # (0.605 + 0.01) * 9.81
        u = np.array([f_hover, 0, 0, 0])
        d = mdl.dynamics_drone(xi, u, p, p.m_hook)
        assert np.abs(d).max() < 1e-10
        xt = mdl.drone_to_plan(xi, p)
        dt = mdl.dynamics_plan(xt, u, p, p.m_hook)
        assert np.abs(dt).max() < 1e-10

    def test_free_fall(self):
        xi = np.zeros(16)
        xi[2] = 2.0
        u = np.zeros(4)
        d = mdl.dynamics_drone(xi, u, PARAMS, PARAMS.m_hook)
        np.testing.assert_allclose(d[3:6], [0, 0, -PARAMS.g], atol=1e-12)

    def test_plan_zero_thrust_structure(self):
        # F = 0: r_L_ddot = c q - g e3 with c = -(m L / (m + m_L)) dq.dq
        rng = np.random.default_rng(5)
        p = PARAMS
        for _ in range(20):
            xt = random_state(rng)
            u = np.zeros(4)
            d = mdl.dynamics_plan(xt, u, p, p.m_hook)
            q = mdl.hook_direction(xt[12], xt[13])
            dq = mdl.hook_direction_rates(xt[12], xt[13], xt[14], xt[15])
            c = -(p.m * p.L / (p.m + p.m_hook)) * (dq @ dq)
            np.testing.assert_allclose(d[3:6], c * q - p.g * np.array([0, 0, 1]), atol=1e-12)

    def test_representation_equivalence(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(1000):
            xi = random_state(rng)
            u = random_input(rng)
            xt = mdl.drone_to_plan(xi, PARAMS)
            d_plan = mdl.dynamics_plan(xt, u, PARAMS, PARAMS.m_hook)
            d_conv = mdl.plan_derivative_from_drone(
                xi, mdl.dynamics_drone(xi, u, PARAMS, PARAMS.m_hook), PARAMS)
            worst = max(worst, np.abs(d_plan - d_conv).max())
        assert worst < 1e-8

    def test_horizontal_rod_rejected(self):
        xi = np.zeros(16)
        xi[2] = 1.0
        xi[13] = np.pi / 2    # rod horizontal along -x
        with pytest.raises(SingularStateError):
            mdl.dynamics_drone(xi, np.array([6.0, 0, 0, 0]), PARAMS, PARAMS.m_hook)

    def test_swing_energy_decay(self):
        """Passive swing under vertical hover thrust: friction strictly
        dissipates the rod swing energy 0.5 |q_dot|^2 + (F / m L) q_z."""
        p = PARAMS
        xi = np.zeros(16)
        xi[2] = 1.0
        xi[12] = 0.3
        F = (p.m + p.m_hook) * p.g
        u = np.array([F, 0, 0, 0])

        def swing_energy(x):
            q = mdl.hook_direction(x[12], x[13])
            dq = mdl.hook_direction_rates(x[12], x[13], x[14], x[15])
            return 0.5 * p.m_hook * p.L**2 * (dq @ dq) + p.m_hook * p.L * F / p.m * (q[2] + 1)

        h = 1e-3
        energies = [swing_energy(xi)]
        for _ in range(4000):
            xi = mdl.rk4_step(lambda x, uu: mdl.dynamics_drone(x, uu, p, p.m_hook), xi, u, h)
            energies.append(swing_energy(xi))
        diffs = np.diff(energies)
        assert np.all(diffs <= 1e-14)
        assert energies[-1] < 0.5 * energies[0]


class TestRK4:
    def test_constant_field(self):
        x = np.array([1.0, 2.0])
        out = mdl.rk4_step(lambda xx, uu: np.zeros(2), x, None, 0.1)
        np.testing.assert_allclose(out, x)

    def test_scalar_linear_field(self):
        h = 0.05
        out = mdl.rk4_step(lambda x, u: -x, np.array([1.0]), None, h)
        expected = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
        np.testing.assert_allclose(out[0], expected, rtol=1e-14)

    def test_ballistic_drop(self):
        p = PARAMS
        xi = np.zeros(16)
        xi[2] = 5.0
        u = np.zeros(4)
        f = lambda x, uu: mdl.dynamics_drone(x, uu, p, p.m_hook)
        for _ in range(20):
            xi = mdl.rk4_step(f, xi, u, 0.05)
        np.testing.assert_allclose(xi[2] - 5.0, -PARAMS.g / 2, atol=1e-9)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            mdl.rk4_step(lambda x, u: x, np.zeros(2), None, 0.0)


class TestLinearize:
    def test_hover_structure(self):
        p = PARAMS
        xi = np.zeros(16)
        xi[2] = 1.0
        u = np.array([(p.m + p.m_hook) * p.g, 0, 0, 0])
        A, B = mdl.linearize(xi, u, p, p.m_hook)
        # kinematic double-integrator rows: d(r)/d(r_dot) = I
        np.testing.assert_allclose(A[0:3, 3:6], np.eye(3), atol=1e-12)
        # thrust column acts on translational and joint acceleration rows only
        thrust_col = B[:, 0]
        mask = np.zeros(16, bool)
        mask[3:6] = True
        mask[14:16] = True
        assert np.abs(thrust_col[~mask]).max() < 1e-12

    def test_matches_central_differences(self):
        rng = np.random.default_rng(7)
        p = PARAMS
        for _ in range(5):
            xi = random_state(rng)
            u = random_input(rng)
            A, B = mdl.linearize(xi, u, p, p.m_hook)
            eps = 1e-6
            f = lambda x, uu: mdl.dynamics_drone(x, uu, p, p.m_hook)
            A_fd = np.zeros_like(A)
            B_fd = np.zeros_like(B)
            for i in range(16):
                dx = np.zeros(16)
                dx[i] = eps
                A_fd[:, i] = (f(xi + dx, u) - f(xi - dx, u)) / (2 * eps)
            for i in range(4):
                du = np.zeros(4)
                du[i] = eps
                B_fd[:, i] = (f(xi, u + du) - f(xi, u - du)) / (2 * eps)
            scale = max(1.0, np.abs(A_fd).max())
            assert np.abs(A - A_fd).max() / scale < 1e-4
            assert np.abs(B - B_fd).max() / max(1.0, np.abs(B_fd).max()) < 1e-4

    def test_singular_point_rejected(self):
        xi = np.zeros(16)
        xi[7] = np.pi / 2 - 0.01
        with pytest.raises(SingularStateError):
            mdl.linearize(xi, np.array([6.0, 0, 0, 0]), PARAMS, PARAMS.m_hook)


class TestBatching:
    def test_batched_matches_loop(self):
        rng = np.random.default_rng(8)
        p = PARAMS
        X = np.stack([random_state(rng) for _ in range(7)], axis=1)
        U = np.stack([random_input(rng) for _ in range(7)], axis=1)
        batch = mdl.dynamics_drone(X, U, p, p.m_hook)
        for j in range(7):
            one = mdl.dynamics_drone(X[:, j], U[:, j], p, p.m_hook)
            np.testing.assert_allclose(batch[:, j], one, atol=1e-14)
