"""SQP solver for the grasp OCP, with warm starts and shrinking-horizon
replanning.

Gauss-Newton SQP with complex-step Jacobians of the RK4 shooting defects
and an l1 merit line search.  The complementarity system is solved by the
standard branch strategy for mathematical programs with complementarity
constraints:

1. converge the smooth tracking problem with the complementarity rows
   inactive (the cumulative-index chain already forces the eps budget);
2. select the grasp index from the relaxed solution (smallest grasp
   residual, later index on ties), which fixes the active complementarity
   branch: eps is pinned to the unit pulse at that index;
3. polish the resulting smooth NLP.  In the payload-centric state the
   grasp conditions (hook position, velocity and yaw matching their
   targets) are *linear* state rows, so the final phase contracts like a
   plain equality-constrained Gauss-Newton iteration.

The slack variable of the relaxed complementarity constraint is recovered
afterwards as nu = f_gr at each window index, which satisfies
eps (f_gr - nu) = 0 exactly.  The grasp rows enter the QP through elastic
slacks with an exact l1 penalty so every QP stays feasible; real-time
iteration mode runs a single phase-3 step from the warm start.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from hookplan import qp as qpmod
from hookplan.model import ManipulatorParams
from hookplan.ocp import (EPS, KAPPA, NU, NUA, NXA, GraspOCP, OCPConfig,
                          build_ocp, smooth_grasp_residual)
from hookplan.prediction import PayloadPrediction

# state coordinates pinned by the grasp condition: position, velocity, yaw
GRASP_COORDS = np.array([0, 1, 2, 3, 4, 5, 8])


class ReplanError(RuntimeError):
    """Replanning is no longer possible (window elapsed or grasp already
    committed before the replan point)."""


@dataclass
class PlanTrajectory:
    """Optimized grasp trajectory plus solver diagnostics."""

    h: float
    t: np.ndarray                 # (N_f + 1,)
    xi: np.ndarray                # (N_f + 1, 16) payload-centric states
    kappa: np.ndarray             # (N_f + 1,)
    u: np.ndarray                 # (N_f, 4)
    eps: np.ndarray               # (N_f,)
    nu: np.ndarray                # (N_f,)
    window: tuple                 # (n_lo, n_hi) in steps
    grasp_index: int
    converged: bool
    relaxed: bool
    status: str
    iterations: int
    defect_max: float
    compl_max: float
    cost: float
    phase_costs: dict
    wall_time: float
    params: ManipulatorParams
    r_p: np.ndarray               # grasp targets stored for evaluation
    psi_r: np.ndarray
    v_r: np.ndarray
    line_search_failures: int = 0

    @property
    def n_f(self) -> int:
        return len(self.u)

    @property
    def grasp_time(self) -> float:
        return self.grasp_index * self.h

    def m_l_at(self, k: int) -> float:
        return self.params.m_hook + (1.0 - self.kappa[k]) * self.params.m_load

    def eps_sum(self) -> float:
        return float(self.eps.sum())

    def grasp_residual_at_index(self) -> float:
        from hookplan.ocp import grasp_residual
        k = self.grasp_index
        return grasp_residual(self.xi[k], self.r_p[k], self.psi_r[k], self.v_r[k])


def solve_sqp_rti(ocp: GraspOCP, guess: np.ndarray | None = None,
                  rti: bool | None = None, verbose: bool = False) -> PlanTrajectory:
    """Solve the grasp OCP; full SQP by default, one iteration when ``rti``.

    Non-convergence returns the best iterate flagged ``converged=False``;
    an infeasible QP triggers the terminal-equality relaxation fallback and
    sets ``relaxed=True``.
    """
    cfg = ocp.config.sqp
    if rti is None:
        rti = cfg.rti
    t0 = time.perf_counter()

    if guess is None:
        z = ocp.initial_guess()
        k_star = None
    else:
        z = np.asarray(guess, dtype=float).copy()
        if z.size != ocp.n_var:
            raise ValueError("warm-start guess has the wrong size")
        k_star = _consolidated_index(ocp, z)
    z = np.minimum(np.maximum(z, ocp.lb), ocp.ub)

    H = _hessian(ocp)
    sigma = 10.0
    sigma_cap = 2000.0
    rho = cfg.compl_penalty
    trust = 2.0
    soft_terminal = False
    relaxed = False
    status = "max-iter"
    ls_failures = 0
    n_iter = 0
    tried_fallback_index = False
    merit_prev = np.inf
    stagnant = 0
    plateau = 0
    max_iter = 1 if rti else cfg.max_iter

    for n_iter in range(1, max_iter + 1):
        lb_z, ub_z = _phase_bounds(ocp, soft_terminal, k_star)
        z = np.minimum(np.maximum(z, lb_z), ub_z)
        A_st, B_st = ocp.stage_jacobians(z)
        A_eq, b_eq, n_soft = _assemble_equalities(ocp, z, A_st, B_st,
                                                  soft_terminal, k_star)
        n_tot = ocp.n_var + 2 * n_soft

        g = np.zeros(n_tot)
        g[:ocp.n_var] = ocp.cost_grad(z)
        g[ocp.n_var:] = rho
        # quadratic slack term vanishes at the solution but keeps the
        # interior-point KKT system well conditioned
        Hq = sp.block_diag([H, rho * sp.eye(2 * n_soft)], format="csr")
        pinned = (ub_z - lb_z) < 1e-12
        free = ~pinned & ~_kappa_mask(ocp)   # kappa chain is linear: no trust
        tr = trust * _trust_scale(ocp)
        lo = np.where(free, np.maximum(lb_z - z, -tr), lb_z - z)
        hi = np.where(free, np.minimum(ub_z - z, tr), ub_z - z)
        lb = np.concatenate([lo, np.zeros(2 * n_soft)])
        ub = np.concatenate([hi, np.full(2 * n_soft, np.inf)])

        c_l1, r_l1, theta_inf = _residuals(ocp, z, soft_terminal, k_star)
        qp_tol = 1e-10 if theta_inf < 1e-5 else 1e-8
        res = qpmod.solve_qp(Hq, g, A_eq=A_eq, b_eq=b_eq, lb=lb, ub=ub,
                             tol=qp_tol, max_iter=60)
        if res.status == qpmod.INFEASIBLE and trust < 1.9:
            trust = min(trust * 2.0, 2.0)   # widen before relaxing anything
            continue
        if res.status == qpmod.INFEASIBLE and not soft_terminal:
            soft_terminal = True
            relaxed = True
            stagnant = 0
            merit_prev = np.inf
            continue
        if res.status == qpmod.INFEASIBLE:
            status = "qp-infeasible"
            break

        dz = res.x[:ocp.n_var]
        step_inf = np.abs(dz).max(initial=0.0)
        small_step = (step_inf <= cfg.tol_stat * (1.0 + np.abs(z).max())
                      or stagnant >= 3)
        if k_star is not None and theta_inf <= cfg.tol_plateau and plateau >= 3:
            # feasible well below every acceptance gate and the merit has
            # flattened: the Gauss-Newton tail is only shaving cost
            status = "converged"
            break

        if small_step and theta_inf <= cfg.tol_con:
            if k_star is not None:
                status = "converged"
                break
            # smooth problem solved: fix the complementarity branch
            k_star = _select_grasp_index(ocp, z)
            z = _repair_index_chain(ocp, z, k_star)
            trust = 0.5
            stagnant = 0
            merit_prev = np.inf
            continue
        if small_step and k_star is not None and theta_inf > cfg.tol_con:
            # branch NLP stationary but infeasible (grasp unreachable
            # here); retry once at the latest window index, else give up
            alt = int(ocp.window_ks[-1])
            if not tried_fallback_index and alt != k_star:
                tried_fallback_index = True
                k_star = alt
                z = _repair_index_chain(ocp, z, k_star)
                trust = 0.5
                stagnant = 0
                merit_prev = np.inf
                continue
            status = "grasp-unreachable"
            break

        if rti:
            z = np.minimum(np.maximum(z + dz, lb_z), ub_z)
            status = "rti"
            break

        # l1 merit line search; sigma tracks the duals of the nonlinear
        # dynamics rows only (the linear cumulative-index rows are always
        # satisfied exactly, yet may carry the rho-scaled grasp shadow
        # price, which would poison the merit), and is capped
        y_dyn = res.y_eq[:NXA * ocp.n_f].reshape(ocp.n_f, NXA)[:, :16]
        sigma = max(sigma, min(1.1 * np.abs(y_dyn).max(initial=0.0) + 1.0,
                               sigma_cap))
        slack_l1 = res.x[ocp.n_var:].sum()
        descent = 0.0
        while True:
            descent = (g[:ocp.n_var] @ dz - sigma * c_l1 - rho * (r_l1 - slack_l1))
            if descent < 0.0 or sigma >= sigma_cap:
                break
            sigma *= 2.0
        merit0 = ocp.cost(z) + sigma * c_l1 + rho * r_l1

        alpha = 1.0
        accepted = False
        while alpha >= 1e-3:
            z_try = np.minimum(np.maximum(z + alpha * dz, lb_z), ub_z)
            cl, rl, _ = _residuals(ocp, z_try, soft_terminal, k_star)
            merit = ocp.cost(z_try) + sigma * cl + rho * rl
            if merit <= merit0 + 1e-4 * alpha * descent + 1e-9 * abs(merit0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            ls_failures += 1
            alpha = 1e-3
            if ls_failures > 10:
                status = "line-search-stalled"
                break
        z = np.minimum(np.maximum(z + alpha * dz, lb_z), ub_z)
        # feasible iterates whose merit stops moving are converged in all
        # but the step-norm test (which dithers at round-off level)
        if abs(merit_prev - merit0) <= 3e-8 * (1.0 + abs(merit0)):
            stagnant += 1
        else:
            stagnant = 0
        plateau = plateau + 1 if abs(merit_prev - merit0) <= 1e-5 * (1.0 + abs(merit0)) else 0
        merit_prev = merit0
        if k_star is not None:
            # adapt the trust radius to the achieved step fraction
            if alpha >= 0.9:
                trust = min(trust * 1.5, 2.0)
            elif alpha <= 0.1:
                trust = max(trust / 3.0, 0.05)
        if verbose:
            print(f"  it {n_iter:3d}: J={ocp.cost(z):9.3f} c={c_l1:9.2e} "
                  f"r={r_l1:9.2e} step={step_inf:8.2e} alpha={alpha:7.3f} "
                  f"trust={trust:5.2f} sigma={sigma:7.1f} qp={res.iterations} "
                  f"k*={k_star}")

    return _make_plan(ocp, z, k_star, status, n_iter, relaxed, ls_failures,
                      time.perf_counter() - t0)


def _consolidated_index(ocp: GraspOCP, z) -> int | None:
    """Grasp index carried by a warm start, if its eps mass is consolidated."""
    _, us = ocp.split(z)
    eps = us[ocp.window_ks, EPS]
    if eps.max(initial=0.0) >= 0.5:
        return int(ocp.window_ks[int(np.argmax(eps))])
    return None


def _trust_scale(ocp: GraspOCP) -> np.ndarray:
    """Per-coordinate trust scaling: inputs get 4x (newton / newton-metre
    moves around the grasp are larger than the metre-scale state moves)."""
    if not hasattr(ocp, "_trust_scale_vec"):
        s = np.ones(ocp.n_var)
        for k in range(ocp.n_f):
            s[ocp.iu(k):ocp.iu(k) + 4] = 4.0
        ocp._trust_scale_vec = s
    return ocp._trust_scale_vec


def _kappa_mask(ocp: GraspOCP) -> np.ndarray:
    if not hasattr(ocp, "_kappa_coord_mask"):
        mask = np.zeros(ocp.n_var, dtype=bool)
        for k in range(ocp.n_f + 1):
            mask[ocp.ix(k) + KAPPA] = True
        ocp._kappa_coord_mask = mask
    return ocp._kappa_coord_mask


def _repair_index_chain(ocp: GraspOCP, z, k_star) -> np.ndarray:
    """Overwrite eps with the unit pulse at k_star and rebuild the kappa
    chain exactly; both are linear.  The hover thrust is shifted by the
    payload-weight change wherever the mass law flips, so the repair does
    not leave a thrust deficit the trust region cannot cover."""
    z = z.copy()
    kappa = 1.0
    for k in range(ocp.n_f):
        m_l_old = ocp.m_l(z[ocp.ix(k) + KAPPA])
        e = 1.0 if k == k_star else 0.0
        z[ocp.iu(k) + EPS] = e
        z[ocp.ix(k) + KAPPA] = kappa
        z[ocp.iu(k)] += (ocp.m_l(kappa) - m_l_old) * ocp.params.g
        kappa -= e
    z[ocp.ix(ocp.n_f) + KAPPA] = kappa
    return z


def _select_grasp_index(ocp: GraspOCP, z) -> int:
    """Window index with the smallest grasp residual (later index on ties,
    which leaves more time to close the approach)."""
    xs, _ = ocp.split(z)
    best_k, best_val = int(ocp.window_ks[0]), np.inf
    for k in ocp.window_ks:
        val, _ = smooth_grasp_residual(xs[k, :16], ocp.pred.r_p[k],
                                       ocp.psi_r[k], ocp.v_r[k])
        if val <= best_val + 1e-9:
            best_k, best_val = int(k), min(val, best_val)
    return best_k


def _phase_bounds(ocp: GraspOCP, soft_terminal: bool, k_star):
    lb_z, ub_z = ocp.lb, ocp.ub
    if soft_terminal or k_star is not None:
        lb_z, ub_z = lb_z.copy(), ub_z.copy()
    if soft_terminal:
        # the terminal pin moved into elastic rows; restore the state box
        i0 = ocp.ix(ocp.n_f)
        lb_z[i0:i0 + 16] = ocp.config.x_min
        ub_z[i0:i0 + 16] = ocp.config.x_max
        lb_z[i0 + KAPPA] = ocp.config.kappa_min
        ub_z[i0 + KAPPA] = ocp.config.kappa_max
    if k_star is not None:
        # fixed complementarity branch: eps is the unit pulse at k_star
        for k in ocp.window_ks:
            val = 1.0 if k == k_star else 0.0
            lb_z[ocp.iu(k) + EPS] = val
            ub_z[ocp.iu(k) + EPS] = val
    return lb_z, ub_z


def _grasp_rows(ocp: GraspOCP, z, k_star):
    """Linear grasp-condition rows at the chosen index: the payload-centric
    state must match [r_p, v_r, psi_r] in its position/velocity/yaw entries."""
    xs, _ = ocp.split(z)
    target = np.empty(7)
    target[0:3] = ocp.pred.r_p[k_star]
    target[3:6] = ocp.v_r[k_star]
    target[6] = ocp.psi_r[k_star]
    resid = target - xs[k_star, GRASP_COORDS]
    return resid


def _assemble_equalities(ocp: GraspOCP, z, A_st, B_st, soft_terminal: bool,
                         k_star):
    """Sparse equality Jacobian and rhs for the QP in step coordinates.

    Rows: RK4 defects (hard); once the branch is fixed, the seven linear
    grasp rows at k_star (elastic); and, when the terminal pin had to be
    relaxed, its rows as elastic too.  Returns (A_eq, b_eq, n_soft) where
    the last 2*n_soft QP variables are the elastic slack pairs.
    """
    n_f, n_var = ocp.n_f, ocp.n_var
    rows_i, cols_i, vals = [], [], []
    r = 0

    def put(r0, c0, M):
        m, n = M.shape
        rows_i.append(r0 + np.repeat(np.arange(m), n))
        cols_i.append(c0 + np.tile(np.arange(n), m))
        vals.append(M.ravel())

    # defects: A_k dx_k + B_k du_k - dx_{k+1} = -c_k
    c = ocp.defects(z)
    b = [-c]
    eye = -np.eye(NXA)
    for k in range(n_f):
        put(r, ocp.ix(k), A_st[k])
        put(r, ocp.iu(k), B_st[k])
        put(r, ocp.ix(k + 1), eye)
        r += NXA

    # elastic rows
    soft_rows = []
    if k_star is not None:
        resid = _grasp_rows(ocp, z, k_star)
        for j, coord in enumerate(GRASP_COORDS):
            dx = np.zeros(NXA)
            dx[coord] = 1.0
            soft_rows.append(((ocp.ix(k_star), dx), resid[j]))
    if soft_terminal:
        xs_n = z[ocp.ix(n_f):ocp.ix(n_f) + NXA]
        for j in range(NXA):
            dx = np.zeros(NXA)
            dx[j] = 1.0
            soft_rows.append(((ocp.ix(n_f), dx), ocp.xbarf[j] - xs_n[j]))

    n_soft = len(soft_rows)
    for i, ((c0, dx), rr) in enumerate(soft_rows):
        put(r, c0, dx[None, :])
        rows_i.append(np.array([r, r]))
        cols_i.append(np.array([n_var + i, n_var + n_soft + i]))
        vals.append(np.array([1.0, -1.0]))
        b.append(np.array([rr]))
        r += 1

    A = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows_i), np.concatenate(cols_i))),
                      shape=(r, n_var + 2 * n_soft)).tocsr()
    return A, np.concatenate(b), n_soft


def _residuals(ocp: GraspOCP, z, soft_terminal: bool, k_star):
    """(defect l1, grasp+terminal l1, joint sup-norm) at the iterate."""
    c = ocp.defects(z)
    r = _grasp_rows(ocp, z, k_star) if k_star is not None else np.zeros(0)
    term = np.zeros(0)
    if soft_terminal:
        term = ocp.xbarf - z[ocp.ix(ocp.n_f):ocp.ix(ocp.n_f) + NXA]
    theta_inf = max(np.abs(c).max(initial=0.0), np.abs(r).max(initial=0.0),
                    np.abs(term).max(initial=0.0))
    return np.abs(c).sum(), np.abs(r).sum() + np.abs(term).sum(), theta_inf


def _hessian(ocp: GraspOCP) -> sp.csr_matrix:
    blocks = []
    mu = ocp.config.sqp.levenberg
    for k in range(ocp.n_f):
        wq, wr = ocp.stage_weights(k)
        blocks.append(2.0 * wq + mu * np.eye(NXA))
        blocks.append(2.0 * wr + mu * np.eye(NUA))
    blocks.append(mu * np.eye(NXA))   # terminal state (pinned, cost-free)
    return sp.block_diag(blocks, format="csr")


def _make_plan(ocp: GraspOCP, z, k_star, status, n_iter, relaxed, ls_failures,
               wall):
    # recover the complementarity slack: nu = f_gr wherever it fits the cap,
    # which zeroes eps (f_gr - nu) at every window index
    xs, us = ocp.split(z)
    for k in ocp.window_ks:
        val, _ = smooth_grasp_residual(xs[k, :16], ocp.pred.r_p[k],
                                       ocp.psi_r[k], ocp.v_r[k])
        us[k, NU] = min(max(val, 0.0), ocp.nu_cap)
        z[ocp.iu(k) + NU] = us[k, NU]

    defects = ocp.defects(z)
    compl = ocp.compl_residuals(z)
    eps = us[:, EPS]
    in_w = ocp.window_ks
    grasp_index = int(in_w[np.argmax(eps[in_w])]) if k_star is None else k_star
    return PlanTrajectory(
        h=ocp.h,
        t=np.arange(ocp.n_f + 1) * ocp.h,
        xi=xs[:, :16].copy(),
        kappa=xs[:, KAPPA].copy(),
        u=us[:, :4].copy(),
        eps=eps.copy(),
        nu=us[:, NU].copy(),
        window=(ocp.n_lo, ocp.n_hi),
        grasp_index=grasp_index,
        converged=(status == "converged"),
        relaxed=relaxed,
        status=status,
        iterations=n_iter,
        defect_max=float(np.abs(defects).max(initial=0.0)),
        compl_max=float(np.abs(compl).max(initial=0.0)),
        cost=ocp.cost(z),
        phase_costs=ocp.cost_by_phase(z),
        wall_time=wall,
        params=ocp.params,
        r_p=ocp.pred.r_p[:ocp.n_f + 1].copy(),
        psi_r=ocp.psi_r[:ocp.n_f + 1].copy(),
        v_r=ocp.v_r[:ocp.n_f + 1].copy(),
        line_search_failures=ls_failures,
    )


def warm_start_from_plan(ocp: GraspOCP, plan: PlanTrajectory) -> np.ndarray:
    """Decision vector for ``ocp`` initialized from a previous plan."""
    if plan.n_f != ocp.n_f:
        raise ValueError("plan horizon does not match the OCP")
    xs = np.column_stack([plan.xi, plan.kappa])
    us = np.column_stack([plan.u, plan.eps, plan.nu])
    return ocp.join(xs, us)


def replan(prev: PlanTrajectory, k_rp: int, new_pred: PayloadPrediction,
           config: OCPConfig, params: ManipulatorParams,
           xbar0: np.ndarray, rti: bool = False) -> PlanTrajectory:
    """Re-solve on the shrunk horizon starting at step ``k_rp`` of ``prev``.

    The grasp window indices shift by k_rp (clamped at zero on the left);
    the previous solution tail warm-starts the SQP.  Raises
    :class:`ReplanError` when the window has fully elapsed without a grasp
    or the grasp already fired before the replan point.
    """
    if not (0 <= k_rp < prev.n_f):
        raise ValueError("k_rp must lie inside the previous horizon")
    n_lo_prev, n_hi_prev = prev.window
    if prev.kappa[k_rp] < 1.0 - 1e-6:
        raise ReplanError(
            f"grasp already committed before step {k_rp} (kappa = {prev.kappa[k_rp]:.3f})")
    n_hi = n_hi_prev - k_rp
    if n_hi < 1:
        raise ReplanError(
            f"grasp window elapsed at replan step {k_rp} without a grasp")
    n_lo = max(n_lo_prev - k_rp, 0)
    n_f = prev.n_f - k_rp

    ocp = build_ocp(new_pred, None, config, params, xbar0,
                    indices=(n_lo, n_hi, n_f))
    guess = _shifted_guess(ocp, prev, k_rp, xbar0)
    return solve_sqp_rti(ocp, guess=guess, rti=rti)


def _shifted_guess(ocp: GraspOCP, prev: PlanTrajectory, k_rp: int, xbar0):
    xs = np.column_stack([prev.xi[k_rp:], prev.kappa[k_rp:]])
    us = np.column_stack([prev.u[k_rp:], prev.eps[k_rp:], prev.nu[k_rp:]])
    xs[0] = xbar0
    return ocp.join(xs, us)
