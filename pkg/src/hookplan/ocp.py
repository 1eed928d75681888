"""Three-phase grasp trajectory optimization problem.

Builds the finite-horizon optimal control problem over the payload-centric
state: quadratic phase costs toward (1) the delayed payload path, (2) the
grasp targets, (3) the drop-off hover; RK4 multiple-shooting defects on the
augmented dynamics; and the relaxed complementarity system that lets the
optimizer pick the grasp instant inside the allowed window:

    eps(k) (f_gr(k) - nu(k)) = 0,   eps in [0, 1],   0 <= nu <= nu_max
    kappa(k+1) = kappa(k) - eps(k),   kappa(0) = 1,   kappa(N_f) = 0
    m_L = m_hook + (1 - kappa) m_load

The cumulative index kappa forces eps to fire somewhere in the window, and
the mass law engages the payload mass in the dynamics downstream of the
grasp index without knowing that index a priori.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hookplan import model as mdl
from hookplan.model import ManipulatorParams
from hookplan.prediction import PayloadPrediction

NXA = 17      # augmented state [xi_t; kappa]
NUA = 6       # augmented input [F, tau; eps; nu]
KAPPA = 16
EPS, NU = 4, 5

# norm smoothing inside the optimizer (keeps f_gr differentiable at zero);
# the slack bound is tightened by NU_MARGIN so the true residual still
# satisfies f_gr <= nu_max at the solution
_SMOOTH = 1e-8
_NU_MARGIN = 1e-7


def default_w_q() -> np.ndarray:
    return np.diag(np.concatenate([
        np.ones(3),          # payload position
        0.1 * np.ones(3),    # payload velocity
        np.zeros(2),         # roll, pitch free
        [3.0],               # yaw
        0.5 * np.ones(3),    # body rates
        np.zeros(2),         # rod angles free
        np.ones(2),          # rod rates damped
    ]))


def default_w_r() -> np.ndarray:
    return 20.0 * np.eye(4)


@dataclass
class GraspWindow:
    """Allowed grasp interval and total duration, in seconds."""

    t_lo: float
    t_hi: float
    t_f: float

    def __post_init__(self):
        if not (0.0 < self.t_lo <= self.t_hi < self.t_f):
            raise ValueError("window must satisfy 0 < t_lo <= t_hi < t_f")

    def indices(self, h: float):
        n_lo = int(round(self.t_lo / h))
        n_hi = int(round(self.t_hi / h))
        n_f = int(round(self.t_f / h))
        if not (0 < n_lo <= n_hi < n_f):
            raise ValueError("window indices collapse at this sampling time")
        return n_lo, n_hi, n_f


@dataclass
class SQPSettings:
    max_iter: int = 80
    tol_stat: float = 1e-7
    tol_con: float = 1e-9
    tol_plateau: float = 1e-7    # feasibility level at which a flat merit counts as converged
    levenberg: float = 1e-8
    compl_penalty: float = 1e4
    rti: bool = False


@dataclass
class OCPConfig:
    """Weights, bounds and targets of the grasp OCP."""

    h: float = 0.05
    w_q1: np.ndarray = field(default_factory=default_w_q)
    w_q2: np.ndarray = field(default_factory=default_w_q)
    w_q3: np.ndarray = field(default_factory=default_w_q)
    w_r1: np.ndarray = field(default_factory=default_w_r)
    w_r2: np.ndarray = field(default_factory=default_w_r)
    w_r3: np.ndarray = field(default_factory=default_w_r)
    t_d: int = 10                      # phase-1 following delay [steps]
    zeta: float = 0.3                  # relative grasp speed gain
    nu_max: float = 1e-3
    x_min: np.ndarray = field(default_factory=lambda: np.array(
        [-25, -25, 0.0, -5, -5, -5, -0.5, -0.5, -12, -10, -10, -10, -0.6, -0.6, -8, -8],
        dtype=float))
    x_max: np.ndarray = field(default_factory=lambda: np.array(
        [25, 25, 10, 5, 5, 5, 0.5, 0.5, 12, 10, 10, 10, 0.6, 0.6, 8, 8], dtype=float))
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.4, -0.4, -0.4]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([16.0, 0.4, 0.4, 0.4]))
    kappa_min: float = -0.01
    kappa_max: float = 1.01
    r_lf: np.ndarray = field(default_factory=lambda: np.array([2.0, -2.0, 1.0]))
    psi_f: float = 0.0
    sqp: SQPSettings = field(default_factory=SQPSettings)

    def __post_init__(self):
        for name in ("w_q1", "w_q2", "w_q3"):
            w = np.asarray(getattr(self, name), dtype=float)
            _check_psd(w, (16, 16), name)
            setattr(self, name, w)
        for name in ("w_r1", "w_r2", "w_r3"):
            w = np.asarray(getattr(self, name), dtype=float)
            _check_psd(w, (4, 4), name)
            setattr(self, name, w)
        self.x_min = np.asarray(self.x_min, dtype=float)
        self.x_max = np.asarray(self.x_max, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        self.r_lf = np.asarray(self.r_lf, dtype=float)
        if self.nu_max <= 0 or self.zeta <= 0:
            raise ValueError("nu_max and zeta must be positive")
        if self.t_d < 0:
            raise ValueError("t_d must be non-negative")
        if (np.any(self.x_min > self.x_max) or np.any(self.u_min > self.u_max)
                or self.kappa_min > self.kappa_max):
            raise ValueError("inconsistent bounds: min > max")


def _check_psd(w, shape, name):
    if w.shape != shape:
        raise ValueError(f"{name} must have shape {shape}")
    if np.abs(w - w.T).max() > 1e-12:
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(w).min() < -1e-10:
        raise ValueError(f"{name} must be positive semidefinite")


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def grasp_targets(pred: PayloadPrediction, zeta: float):
    """Target hook yaw and velocity sequences from the payload forecast.

    When the payload's body x axis points along its velocity (|psi_bar| <=
    pi/2) the hook approaches from behind; otherwise the approach target
    rotates 90 degrees to grasp from the side.
    """
    if len(pred) == 0:
        raise ValueError("prediction is empty")
    n = len(pred)
    psi_r = np.empty(n)
    v_r = np.empty((n, 3))
    for k in range(n):
        pb = pred.psi_bar_p[k]
        if abs(pb) <= np.pi / 2:
            psi_r[k] = pred.psi_p[k]
            v_r[k] = pred.v_p[k] + zeta * rotation_z(pb) @ pred.v_p[k]
        else:
            theta = np.sign(pb) * np.pi / 2
            psi_r[k] = pred.psi_p[k] - theta
            v_r[k] = pred.v_p[k] + zeta * rotation_z(pb - theta) @ pred.v_p[k]
    return psi_r, v_r


def phase_references(pred: PayloadPrediction, window: GraspWindow, config: OCPConfig,
                     params: ManipulatorParams, indices: tuple | None = None):
    """Per-phase target state sequences and the hover input reference.

    Phase 1 follows the payload path with a delay of t_d steps (indices
    clamped at zero), phase 2 tracks the grasp targets, phase 3 holds the
    drop-off pose.  The input reference is hover thrust, with the payload
    mass engaged in phase 3.
    """
    n_lo, n_hi, n_f = window.indices(config.h) if indices is None else indices
    if n_f + 1 > len(pred):
        raise ValueError("prediction shorter than the planning horizon")
    psi_r, v_r = grasp_targets(pred, config.zeta)

    ref1 = np.zeros((n_lo + 1, 16))
    for k in range(n_lo + 1):
        kd = max(k - config.t_d, 0)
        ref1[k, 0:3] = pred.r_p[kd]
        ref1[k, 8] = psi_r[kd]

    ref2 = np.zeros((n_hi - n_lo + 1, 16))
    for i, k in enumerate(range(n_lo, n_hi + 1)):
        ref2[i, 0:3] = pred.r_p[k]
        ref2[i, 3:6] = v_r[k]
        ref2[i, 8] = psi_r[k]

    ref3 = np.zeros((n_f - n_hi + 1, 16))
    ref3[:, 0:3] = config.r_lf
    ref3[:, 8] = config.psi_f

    u_ref = np.zeros((n_f, 4))
    u_ref[:n_hi, 0] = (params.m + params.m_hook) * params.g
    u_ref[n_hi:, 0] = (params.m + params.m_hook + params.m_load) * params.g
    return ref1, ref2, ref3, u_ref


def grasp_residual(xi_t, r_p, psi_r, v_r) -> float:
    """Grasp condition residual: position + yaw + velocity mismatch norms."""
    xi_t = np.asarray(xi_t)
    return float(np.linalg.norm(xi_t[0:3] - r_p)
                 + abs(xi_t[8] - psi_r)
                 + np.linalg.norm(xi_t[3:6] - v_r))


def _smooth_norm(x):
    return np.sqrt(np.dot(x, x) + _SMOOTH ** 2) - _SMOOTH


def smooth_grasp_residual(xi_t, r_p, psi_r, v_r):
    """Smoothed residual and its gradient w.r.t. the 16 plan-state entries."""
    dp = xi_t[0:3] - r_p
    dpsi = xi_t[8] - psi_r
    dv = xi_t[3:6] - v_r
    np_ = np.sqrt(dp @ dp + _SMOOTH ** 2)
    ns = np.sqrt(dpsi ** 2 + _SMOOTH ** 2)
    nv = np.sqrt(dv @ dv + _SMOOTH ** 2)
    val = (np_ - _SMOOTH) + (ns - _SMOOTH) + (nv - _SMOOTH)
    grad = np.zeros(16)
    grad[0:3] = dp / np_
    grad[3:6] = dv / nv
    grad[8] = dpsi / ns
    return val, grad


class GraspOCP:
    """Assembled multiple-shooting NLP for one planning horizon.

    Decision vector layout: ``[x_0 (17) | u_0 (6) | x_1 | u_1 | ... | x_Nf]``
    giving ``17 (N_f + 1) + 6 N_f`` variables.  All metadata needed by the
    SQP solver (bounds, references, weights, window, grasp targets) lives
    here; the object is immutable during a solve.
    """

    def __init__(self, pred: PayloadPrediction, window: GraspWindow | None,
                 config: OCPConfig, params: ManipulatorParams, xbar0: np.ndarray,
                 indices: tuple | None = None):
        self.pred = pred
        self.window = window
        self.config = config
        self.params = params
        self.h = config.h
        if indices is None:
            if window is None:
                raise ValueError("either a grasp window or explicit indices required")
            self.n_lo, self.n_hi, self.n_f = window.indices(config.h)
        else:
            # replanning path: n_lo may clamp to 0 on a shrunk horizon
            self.n_lo, self.n_hi, self.n_f = indices
            if not (0 <= self.n_lo <= self.n_hi < self.n_f):
                raise ValueError("invalid window indices")
        if self.n_f + 1 > len(pred):
            raise ValueError("prediction shorter than the planning horizon")

        xbar0 = np.asarray(xbar0, dtype=float)
        if xbar0.shape != (NXA,):
            raise ValueError("xbar0 must be a 17-vector [xi_t; kappa]")
        if abs(xbar0[KAPPA] - 1.0) > 1e-9:
            raise ValueError("kappa(0) must be 1")
        lo = np.concatenate([config.x_min, [config.kappa_min]])
        hi = np.concatenate([config.x_max, [config.kappa_max]])
        if np.any(xbar0 < lo - 1e-9) or np.any(xbar0 > hi + 1e-9):
            raise ValueError("initial state violates the state bounds")
        self.xbar0 = xbar0

        self.psi_r, self.v_r = grasp_targets(pred, config.zeta)
        ref1, ref2, ref3, u_ref = phase_references(
            pred, window, config, params, indices=(self.n_lo, self.n_hi, self.n_f))
        # stage references k = 0 .. N_f - 1 and phase weights
        self.x_ref = np.zeros((self.n_f, 16))
        self.u_ref = u_ref
        self.phase = np.empty(self.n_f, dtype=int)
        for k in range(self.n_f):
            if k < self.n_lo:
                self.x_ref[k] = ref1[k]
                self.phase[k] = 1
            elif k < self.n_hi:
                self.x_ref[k] = ref2[k - self.n_lo]
                self.phase[k] = 2
            else:
                self.x_ref[k] = ref3[k - self.n_hi]
                self.phase[k] = 3
        self.w_q = {1: config.w_q1, 2: config.w_q2, 3: config.w_q3}
        self.w_r = {1: config.w_r1, 2: config.w_r2, 3: config.w_r3}

        self.xbarf = np.zeros(NXA)
        self.xbarf[0:3] = config.r_lf
        self.xbarf[8] = config.psi_f
        self.xbarf[KAPPA] = 0.0
        if np.any(self.xbarf < lo - 1e-9) or np.any(self.xbarf > hi + 1e-9):
            raise ValueError("terminal target violates the state bounds")

        self.n_var = NXA * (self.n_f + 1) + NUA * self.n_f
        self.window_ks = np.arange(self.n_lo, self.n_hi + 1)
        self.nu_cap = config.nu_max - _NU_MARGIN
        self._build_bounds()

    # ---- indexing ------------------------------------------------------
    def ix(self, k: int) -> int:
        """Offset of state x_k in the decision vector."""
        return k * (NXA + NUA)

    def iu(self, k: int) -> int:
        """Offset of input u_k in the decision vector."""
        return k * (NXA + NUA) + NXA

    def split(self, z: np.ndarray):
        """Decision vector -> (states (N_f+1, 17), inputs (N_f, 6))."""
        xs = np.empty((self.n_f + 1, NXA))
        us = np.empty((self.n_f, NUA))
        for k in range(self.n_f + 1):
            xs[k] = z[self.ix(k):self.ix(k) + NXA]
        for k in range(self.n_f):
            us[k] = z[self.iu(k):self.iu(k) + NUA]
        return xs, us

    def join(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        z = np.empty(self.n_var)
        for k in range(self.n_f + 1):
            z[self.ix(k):self.ix(k) + NXA] = xs[k]
        for k in range(self.n_f):
            z[self.iu(k):self.iu(k) + NUA] = us[k]
        return z

    # ---- bounds --------------------------------------------------------
    def _build_bounds(self):
        c = self.config
        lb = np.empty(self.n_var)
        ub = np.empty(self.n_var)
        for k in range(self.n_f + 1):
            lb[self.ix(k):self.ix(k) + 16] = c.x_min
            ub[self.ix(k):self.ix(k) + 16] = c.x_max
            lb[self.ix(k) + KAPPA] = c.kappa_min
            ub[self.ix(k) + KAPPA] = c.kappa_max
        in_window = np.zeros(self.n_f, dtype=bool)
        in_window[self.window_ks[self.window_ks < self.n_f]] = True
        for k in range(self.n_f):
            lb[self.iu(k):self.iu(k) + 4] = c.u_min
            ub[self.iu(k):self.iu(k) + 4] = c.u_max
            if in_window[k]:
                lb[self.iu(k) + EPS], ub[self.iu(k) + EPS] = 0.0, 1.0
                lb[self.iu(k) + NU], ub[self.iu(k) + NU] = 0.0, self.nu_cap
            else:
                lb[self.iu(k) + EPS] = ub[self.iu(k) + EPS] = 0.0
                lb[self.iu(k) + NU] = ub[self.iu(k) + NU] = 0.0
        # boundary conditions: full pin of x_0 and x_Nf
        lb[self.ix(0):self.ix(0) + NXA] = self.xbar0
        ub[self.ix(0):self.ix(0) + NXA] = self.xbar0
        n = self.n_f
        lb[self.ix(n):self.ix(n) + NXA] = self.xbarf
        ub[self.ix(n):self.ix(n) + NXA] = self.xbarf
        self.lb, self.ub = lb, ub
        self.in_window = in_window

    # ---- dynamics ------------------------------------------------------
    def m_l(self, kappa):
        return self.params.m_hook + (1.0 - kappa) * self.params.m_load

    def step_batch(self, X, U):
        """Augmented RK4 step for stacked stages: X (17, B), U (6, B)."""
        xi = X[:16]
        kappa = X[KAPPA]
        u = U[:4]
        m_l = self.m_l(kappa)
        f = lambda x, uu: mdl.dynamics_plan(x, uu, self.params, m_l, check=False)
        xi_next = mdl.rk4_step(f, xi, u, self.h)
        out = np.empty_like(X)
        out[:16] = xi_next
        out[KAPPA] = kappa - U[EPS]
        return out

    def defects(self, z: np.ndarray) -> np.ndarray:
        """Shooting-gap residuals f_bar(x_k, u_k) - x_{k+1}, flattened."""
        xs, us = self.split(z)
        pred_next = self.step_batch(xs[:-1].T, us.T).T
        return (pred_next - xs[1:]).ravel()

    def stage_jacobians(self, z: np.ndarray):
        """Complex-step Jacobians of the augmented step at every stage.

        Returns A (N_f, 17, 17) and B (N_f, 17, 6); exact to round-off.
        """
        xs, us = self.split(z)
        n, cols = self.n_f, NXA + NUA
        eps = 1e-100
        X = np.repeat(xs[:-1].T.astype(complex), cols, axis=1)   # (17, n*cols)
        U = np.repeat(us.T.astype(complex), cols, axis=1)
        for j in range(NXA):
            X[j, j::cols] += 1j * eps
        for j in range(NUA):
            U[j, NXA + j::cols] += 1j * eps
        out = np.imag(self.step_batch(X, U)) / eps               # (17, n*cols)
        out = out.reshape(NXA, n, cols)
        A = np.transpose(out[:, :, :NXA], (1, 0, 2))
        B = np.transpose(out[:, :, NXA:], (1, 0, 2))
        return A, B

    # ---- complementarity ----------------------------------------------
    def compl_residuals(self, z: np.ndarray) -> np.ndarray:
        """eps_k (f_gr_smooth(k) - nu_k) over the grasp window."""
        xs, us = self.split(z)
        out = np.empty(len(self.window_ks))
        for i, k in enumerate(self.window_ks):
            val, _ = smooth_grasp_residual(xs[k, :16], self.pred.r_p[k],
                                           self.psi_r[k], self.v_r[k])
            out[i] = us[k, EPS] * (val - us[k, NU])
        return out

    def compl_rows(self, z: np.ndarray):
        """Linearization of the windowed complementarity constraints.

        Returns (rows, rhs): ``rows`` maps a step dz to the first-order
        change, as triplets (k, dvec_x (17,), dvec_u (6,)).
        """
        xs, us = self.split(z)
        rows = []
        rhs = np.empty(len(self.window_ks))
        for i, k in enumerate(self.window_ks):
            val, grad = smooth_grasp_residual(xs[k, :16], self.pred.r_p[k],
                                              self.psi_r[k], self.v_r[k])
            e, nu = us[k, EPS], us[k, NU]
            dx = np.zeros(NXA)
            dx[:16] = e * grad
            du = np.zeros(NUA)
            du[EPS] = val - nu
            du[NU] = -e
            rows.append((k, dx, du))
            rhs[i] = -(e * (val - nu))
        return rows, rhs

    def true_grasp_residuals(self, z: np.ndarray) -> np.ndarray:
        """Unsmoothed f_gr over the window (reported, not optimized)."""
        xs, _ = self.split(z)
        return np.array([
            grasp_residual(xs[k, :16], self.pred.r_p[k], self.psi_r[k], self.v_r[k])
            for k in self.window_ks])

    # ---- cost ----------------------------------------------------------
    def stage_weights(self, k: int):
        wq = np.zeros((NXA, NXA))
        wq[:16, :16] = self.w_q[self.phase[k]]
        wq[KAPPA, KAPPA] = 1e-8
        wr = np.zeros((NUA, NUA))
        wr[:4, :4] = self.w_r[self.phase[k]]
        wr[EPS, EPS] = 1e-8
        wr[NU, NU] = 1e-8
        return wq, wr

    def cost(self, z: np.ndarray) -> float:
        xs, us = self.split(z)
        total = 0.0
        for k in range(self.n_f):
            wq, wr = self.stage_weights(k)
            dx = xs[k].copy()
            dx[:16] -= self.x_ref[k]
            du = us[k].copy()
            du[:4] -= self.u_ref[k]
            total += dx @ wq @ dx + du @ wr @ du
        return float(total)

    def cost_by_phase(self, z: np.ndarray):
        xs, us = self.split(z)
        out = {1: 0.0, 2: 0.0, 3: 0.0}
        for k in range(self.n_f):
            wq, wr = self.stage_weights(k)
            dx = xs[k].copy()
            dx[:16] -= self.x_ref[k]
            du = us[k].copy()
            du[:4] -= self.u_ref[k]
            out[self.phase[k]] += float(dx @ wq @ dx + du @ wr @ du)
        return out

    def cost_grad(self, z: np.ndarray) -> np.ndarray:
        xs, us = self.split(z)
        g = np.zeros(self.n_var)
        for k in range(self.n_f):
            wq, wr = self.stage_weights(k)
            dx = xs[k].copy()
            dx[:16] -= self.x_ref[k]
            du = us[k].copy()
            du[:4] -= self.u_ref[k]
            g[self.ix(k):self.ix(k) + NXA] = 2.0 * wq @ dx
            g[self.iu(k):self.iu(k) + NUA] = 2.0 * wr @ du
        return g

    # ---- initial guess --------------------------------------------------
    def initial_guess(self) -> np.ndarray:
        """Hover interpolation with uniform grasp-index mass in the window."""
        n = self.n_f
        xs = np.zeros((n + 1, NXA))
        t = np.linspace(0.0, 1.0, n + 1)
        for j in range(3):
            xs[:, j] = (1 - t) * self.xbar0[j] + t * self.config.r_lf[j]
        xs[:, 8] = (1 - t) * self.xbar0[8] + t * self.config.psi_f
        us = np.zeros((n, NUA))
        width = len(self.window_ks)
        eps_val = 1.0 / width
        kappa = 1.0
        for k in range(n):
            if self.in_window[k]:
                us[k, EPS] = eps_val
                us[k, NU] = self.nu_cap
            xs[k, KAPPA] = kappa
            kappa -= us[k, EPS]
            us[k, 0] = (self.params.m + self.m_l(xs[k, KAPPA])) * self.params.g
        xs[n, KAPPA] = kappa
        xs[0] = self.xbar0
        xs[n, :16] = self.xbarf[:16]
        return self.join(xs, us)


def build_ocp(pred: PayloadPrediction, window: GraspWindow | None, config: OCPConfig,
              params: ManipulatorParams, xbar0: np.ndarray,
              indices: tuple | None = None) -> GraspOCP:
    """Assemble the grasp OCP (validates dimensions and bound feasibility)."""
    return GraspOCP(pred, window, config, params, xbar0, indices=indices)
