"""Rigid-body model of the aerial manipulator.

The vehicle is a quadrotor (rigid body) carrying a massless rigid rod on a
passive 2-DoF revolute joint; the hook plus payload is a point mass at the
rod tip.  Two 16-dimensional state vectors are used:

drone-centric ``xi``::

    [r (3), r_dot (3), lam = (phi, theta, psi) (3), omega (3),
     alpha, beta, alpha_dot, beta_dot]

and payload-centric ``xi_t`` (identical except the translational block holds
the rod-tip position/velocity ``r_L``, ``r_L_dot``).  The rod direction is

    q(alpha, beta) = [-cos(alpha) sin(beta), sin(alpha), -cos(alpha) cos(beta)]

so the tip sits at ``r_L = r + L q``.  All dynamics functions accept either a
single state (shape ``(16,)``) or a batch (shape ``(16, B)``) and propagate
complex perturbations, which makes complex-step differentiation exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# State vector layout (both representations).
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)      # roll, pitch, yaw
OMEGA = slice(9, 12)
ALPHA, BETA = 12, 13
DALPHA, DBETA = 14, 15
NX = 16
NU = 4

# Singularity margins: pitch away from +-pi/2 and rod away from horizontal.
PITCH_MARGIN = 0.05
QZ_MARGIN = 0.05


class SingularStateError(ValueError):
    """State is too close to a kinematic singularity (pitch ~ +-pi/2 or
    horizontal rod) for the dynamics/linearization to be well defined."""


@dataclass
class ManipulatorParams:
    """Physical constants of the drone + hook + payload assembly.

    ``delta_jx``, ``delta_jy``, ``delta_b`` are half-widths of the parameter
    uncertainty intervals around the nominal inertia/friction values and must
    stay strictly below the nominals so every admissible perturbation keeps
    the parameters positive.
    """

    m: float = 0.605            # drone mass [kg]
    m_hook: float = 0.01        # hook mass [kg]
    m_load: float = 0.1         # payload mass [kg]
    J: np.ndarray = field(default_factory=lambda: np.array([1.5e-3, 1.45e-3, 2.66e-3]))
    L: float = 0.4              # rod length [m]
    b: float = 0.29             # joint viscous friction [rad s]
    g: float = 9.81             # gravity [m/s^2]
    delta_jx: float = 3e-4
    delta_jy: float = 3e-4
    delta_b: float = 0.1

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        if self.J.shape != (3,):
            raise ValueError("J must be a 3-vector of diagonal inertia entries")
        for name in ("m", "m_hook", "m_load", "L", "b", "g"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if np.any(self.J <= 0.0):
            raise ValueError("inertia entries must be strictly positive")
        for name in ("delta_jx", "delta_jy", "delta_b"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.delta_jx >= self.J[0] or self.delta_jy >= self.J[1]:
            raise ValueError("inertia uncertainty range must be smaller than nominal")
        if self.delta_b >= self.b:
            raise ValueError("friction uncertainty range must be smaller than nominal")

    def perturbed(self, delta: np.ndarray) -> "ManipulatorParams":
        """Params with (J_x, J_y, b) displaced by normalized ``delta`` in [-1, 1]^3."""
        delta = np.asarray(delta, dtype=float)
        J = self.J.copy()
        J[0] += self.delta_jx * delta[0]
        J[1] += self.delta_jy * delta[1]
        return ManipulatorParams(
            m=self.m, m_hook=self.m_hook, m_load=self.m_load, J=J, L=self.L,
            b=self.b + self.delta_b * delta[2], g=self.g,
            delta_jx=self.delta_jx, delta_jy=self.delta_jy, delta_b=self.delta_b)


def hook_direction(alpha, beta):
    """Unit vector from the drone CoM to the rod tip.

    Accepts scalars or broadcastable arrays; the result has shape
    ``(3,) + broadcast_shape``.
    """
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    return np.stack([-ca * sb, sa + 0.0 * cb, -ca * cb])


def hook_direction_rates(alpha, beta, dalpha, dbeta):
    """Time derivative of :func:`hook_direction` by the chain rule."""
    q_a, q_b = _hook_direction_partials(alpha, beta)
    return q_a * dalpha + q_b * dbeta


def hook_direction_accel(alpha, beta, dalpha, dbeta, ddalpha, ddbeta):
    """Second time derivative of the rod direction for given joint accelerations."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    q_a, q_b = _hook_direction_partials(alpha, beta)
    q_aa = np.stack([ca * sb, -sa + 0.0 * cb, ca * cb])     # = -q
    q_ab = np.stack([sa * cb, 0.0 * sa, -sa * sb])
    q_bb = np.stack([ca * sb, 0.0 * sa, ca * cb])
    return (q_a * ddalpha + q_b * ddbeta
            + q_aa * dalpha ** 2 + 2.0 * q_ab * dalpha * dbeta + q_bb * dbeta ** 2)


def _hook_direction_partials(alpha, beta):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    q_a = np.stack([sa * sb, ca + 0.0 * cb, sa * cb])
    q_b = np.stack([-ca * cb, 0.0 * sa, ca * sb])
    return q_a, q_b


def payload_kinematics(xi: np.ndarray, params: ManipulatorParams):
    """Rod-tip position and velocity ``(r_L, r_L_dot)`` from a drone state."""
    xi = np.asarray(xi)
    q = hook_direction(xi[ALPHA], xi[BETA])
    dq = hook_direction_rates(xi[ALPHA], xi[BETA], xi[DALPHA], xi[DBETA])
    return xi[POS] + params.L * q, xi[VEL] + params.L * dq


def drone_to_plan(xi: np.ndarray, params: ManipulatorParams) -> np.ndarray:
    """Convert a drone-centric state to the payload-centric representation."""
    xi = np.asarray(xi)
    out = xi.copy()
    r_l, v_l = payload_kinematics(xi, params)
    out[POS], out[VEL] = r_l, v_l
    return out


def plan_to_drone(xi_t: np.ndarray, params: ManipulatorParams) -> np.ndarray:
    """Inverse of :func:`drone_to_plan`."""
    xi_t = np.asarray(xi_t)
    out = xi_t.copy()
    q = hook_direction(xi_t[ALPHA], xi_t[BETA])
    dq = hook_direction_rates(xi_t[ALPHA], xi_t[BETA], xi_t[DALPHA], xi_t[DBETA])
    out[POS] = xi_t[POS] - params.L * q
    out[VEL] = xi_t[VEL] - params.L * dq
    return out


def attitude_to_rotation(lam) -> np.ndarray:
    """Body-to-world rotation from roll/pitch/yaw.

    Intrinsic Z-Y-X composition: R = Rz(psi) Ry(theta) Rx(phi).
    """
    phi, theta, psi = lam[0], lam[1], lam[2]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cps, sps = np.cos(psi), np.sin(psi)
    z = 0.0 * (cph + cth + cps)
    row0 = np.stack([cps * cth, cps * sth * sph - sps * cph, cps * sth * cph + sps * sph])
    row1 = np.stack([sps * cth, sps * sth * sph + cps * cph, sps * sth * cph - cps * sph])
    row2 = np.stack([-sth + z, cth * sph + z, cth * cph + z])
    return np.stack([row0, row1, row2])


def euler_rate_transform(lam) -> np.ndarray:
    """Matrix Q with omega = Q lam_dot for the Z-Y-X convention.

    Raises :class:`SingularStateError` when the pitch is within
    ``PITCH_MARGIN`` of +-pi/2 (gimbal lock).
    """
    phi, theta = lam[0], lam[1]
    if np.any(np.abs(np.real(theta)) >= np.pi / 2 - PITCH_MARGIN):
        raise SingularStateError("pitch too close to +-pi/2 for Euler rates")
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    one = 1.0 + 0.0 * cph
    zero = 0.0 * cph
    return np.stack([
        np.stack([one, zero, -sth]),
        np.stack([zero, cph, sph * cth]),
        np.stack([zero, -sph, cph * cth]),
    ])


def _euler_rates(lam, omega):
    """lam_dot = Q(lam)^-1 omega, written out to stay batch- and complex-safe."""
    phi, theta = lam[0], lam[1]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, tth = np.cos(theta), np.tan(theta)
    wx, wy, wz = omega[0], omega[1], omega[2]
    phi_dot = wx + sph * tth * wy + cph * tth * wz
    theta_dot = cph * wy - sph * wz
    psi_dot = (sph * wy + cph * wz) / cth
    return np.stack([phi_dot, theta_dot, psi_dot])


def _check_nonsingular(xi):
    theta = np.real(xi[ATT][1])
    if np.any(np.abs(theta) >= np.pi / 2 - PITCH_MARGIN):
        raise SingularStateError("pitch too close to +-pi/2")
    qz = -np.cos(np.real(xi[ALPHA])) * np.cos(np.real(xi[BETA]))
    if np.any(np.abs(qz) <= QZ_MARGIN):
        raise SingularStateError("rod orientation too close to horizontal")


def _rod_blocks(xi, u, params):
    """Shared pieces of both dynamics: (q, dq, F R e3, q x (q x F R e3),
    dq.dq, joint accelerations).

    q_ddot follows the point-mass suspension model

        q_ddot = (m L)^-1 q x (q x F R e3) - (dq . dq) q

    and the joint accelerations come from differentiating
    alpha = asin(q_y), beta = atan2(-q_x, -q_z) twice:

        alpha_ddot = (q_ddot_y + sin(alpha) alpha_dot^2) / cos(alpha)
        beta_ddot  = (q_ddot_x q_z - q_x q_ddot_z) / cos(alpha)^2
                     + 2 alpha_dot beta_dot tan(alpha)
    """
    alpha, beta = xi[ALPHA], xi[BETA]
    da, db = xi[DALPHA], xi[DBETA]
    q = hook_direction(alpha, beta)
    dq = hook_direction_rates(alpha, beta, da, db)
    R = attitude_to_rotation(xi[ATT])
    # thrust vector in the world frame: F * R e3 (third column of R)
    fre3 = u[0] * np.stack([R[0, 2], R[1, 2], R[2, 2]])
    dq_dq = dq[0] ** 2 + dq[1] ** 2 + dq[2] ** 2
    qxf = _cross(q, _cross(q, fre3))
    q_dd = qxf / (params.m * params.L) - dq_dq * q

    ca, sa, ta = np.cos(alpha), np.sin(alpha), np.tan(alpha)
    dd_alpha = (q_dd[1] + sa * da ** 2) / ca
    dd_beta = (q_dd[0] * q[2] - q[0] * q_dd[2]) / ca ** 2 + 2.0 * da * db * ta
    return q, dq, fre3, qxf, dq_dq, dd_alpha, dd_beta


def _cross(a, b):
    return np.stack([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def dynamics_drone(xi, u, params: ManipulatorParams, m_l, check: bool = True):
    """State derivative of the drone-centric model.

    ``m_l`` is the suspended point mass (hook alone before the grasp, hook +
    payload after it) and is passed explicitly because it changes at the
    grasp event.

    The joint friction damps the rod direction as q_ddot -> q_ddot - b q_dot,
    so the drone acceleration is the payload-side block shifted by the full
    damped rod acceleration, r_ddot = r_L_ddot - L (q_ddot_free - b q_dot).
    This keeps the two state representations describing one and the same
    system; at zero joint rates it coincides with the frictionless form
    f_r(q, q_dot, R, F).
    """
    xi = np.asarray(xi)
    u = np.asarray(u)
    if check:
        _check_nonsingular(xi)
    q, dq, fre3, qxf, dq_dq, dd_a, dd_b = _rod_blocks(xi, u, params)

    msum = params.m + m_l
    q_f = q[0] * fre3[0] + q[1] * fre3[1] + q[2] * fre3[2]
    r_l_dd = (q_f - params.m * params.L * dq_dq) / msum * q - params.g * _e3_like(q)
    q_dd_free = qxf / (params.m * params.L) - dq_dq * q
    r_dd = r_l_dd - params.L * (q_dd_free - params.b * dq)

    lam_dot = _euler_rates(xi[ATT], xi[OMEGA])
    om_dot = _body_rate_dynamics(xi[OMEGA], u, params.J)

    out = np.empty(xi.shape, dtype=np.result_type(xi, u))
    out[POS] = xi[VEL]
    out[VEL] = r_dd
    out[ATT] = lam_dot
    out[OMEGA] = om_dot
    out[ALPHA] = xi[DALPHA]
    out[BETA] = xi[DBETA]
    out[DALPHA] = dd_a - params.b * xi[DALPHA]
    out[DBETA] = dd_b - params.b * xi[DBETA]
    return out


def dynamics_plan(xi_t, u, params: ManipulatorParams, m_l, check: bool = True):
    """State derivative of the payload-centric model.

    Identical to :func:`dynamics_drone` except for the translational block

        r_L_ddot = (m + m_L)^-1 (q^T F R e3 - m L dq.dq) q - g e3.
    """
    xi_t = np.asarray(xi_t)
    u = np.asarray(u)
    if check:
        _check_nonsingular(xi_t)
    q, dq, fre3, qxf, dq_dq, dd_a, dd_b = _rod_blocks(xi_t, u, params)

    msum = params.m + m_l
    q_f = q[0] * fre3[0] + q[1] * fre3[1] + q[2] * fre3[2]
    r_l_dd = (q_f - params.m * params.L * dq_dq) / msum * q - params.g * _e3_like(q)

    lam_dot = _euler_rates(xi_t[ATT], xi_t[OMEGA])
    om_dot = _body_rate_dynamics(xi_t[OMEGA], u, params.J)

    out = np.empty(xi_t.shape, dtype=np.result_type(xi_t, u))
    out[POS] = xi_t[VEL]
    out[VEL] = r_l_dd
    out[ATT] = lam_dot
    out[OMEGA] = om_dot
    out[ALPHA] = xi_t[DALPHA]
    out[BETA] = xi_t[DBETA]
    out[DALPHA] = dd_a - params.b * xi_t[DALPHA]
    out[DBETA] = dd_b - params.b * xi_t[DBETA]
    return out


def _e3_like(q):
    """[0, 0, 1] broadcast against the batch shape of q."""
    e = np.zeros_like(q)
    e[2] = 1.0
    return e


def _body_rate_dynamics(om, u, J):
    """Euler rigid-body block J^-1 (tau - omega x J omega) for diagonal J."""
    Jx, Jy, Jz = J
    return np.stack([
        (u[1] - (Jz - Jy) * om[1] * om[2]) / Jx,
        (u[2] - (Jx - Jz) * om[2] * om[0]) / Jy,
        (u[3] - (Jy - Jx) * om[0] * om[1]) / Jz,
    ])


def plan_derivative_from_drone(xi, dxi, params: ManipulatorParams):
    """Map a drone-state derivative to the payload-centric derivative.

    Used to check representation equivalence: the translational blocks shift
    by L q_dot and L q_ddot, all other components are shared.
    """
    alpha, beta = xi[ALPHA], xi[BETA]
    da, db = xi[DALPHA], xi[DBETA]
    out = np.array(dxi, copy=True)
    out[POS] = dxi[POS] + params.L * hook_direction_rates(alpha, beta, da, db)
    out[VEL] = dxi[VEL] + params.L * hook_direction_accel(
        alpha, beta, da, db, dxi[DALPHA], dxi[DBETA])
    return out


def rk4_step(f, x, u, h: float):
    """Classical 4th-order Runge-Kutta update for x_dot = f(x, u)."""
    if h <= 0.0:
        raise ValueError("step size must be positive")
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linearize(xi_star, u_star, params: ManipulatorParams, m_l):
    """Jacobians (A, B) of :func:`dynamics_drone` at a reference point.

    Complex-step differentiation: exact to machine precision, no step-size
    tuning.  The reference must be non-singular.
    """
    return _jacobians(lambda x, u: dynamics_drone(x, u, params, m_l), xi_star, u_star)


def linearize_plan(xi_t_star, u_star, params: ManipulatorParams, m_l):
    """Jacobians of :func:`dynamics_plan` at a reference point."""
    return _jacobians(lambda x, u: dynamics_plan(x, u, params, m_l), xi_t_star, u_star)


_CS_EPS = 1e-100


def _jacobians(f, x0, u0):
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n, m = x0.size, u0.size
    # batch of n+m complex-perturbed copies, one perturbed coordinate each
    X = np.tile(x0[:, None].astype(complex), (1, n + m))
    U = np.tile(u0[:, None].astype(complex), (1, n + m))
    X[np.arange(n), np.arange(n)] += 1j * _CS_EPS
    U[np.arange(m), n + np.arange(m)] += 1j * _CS_EPS
    D = np.imag(f(X, U)) / _CS_EPS
    return D[:, :n], D[:, n:]
