"""Convex quadratic programming by a primal-dual interior-point method.

Solves

    minimize    0.5 x' H x + g' x
    subject to  A_eq x = b_eq,   C x <= d,   lb <= x <= ub

with H positive semidefinite (a small static regularization keeps the KKT
system quasidefinite).  Mehrotra predictor-corrector steps; the KKT system is
factorized sparse (SuperLU) whenever the inputs are sparse or large, which is
what makes the multiple-shooting QPs of the trajectory optimizer cheap: their
KKT matrix is block-banded.

The solver is reentrant: no module state, every call owns its workspace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


@dataclass
class QPResult:
    x: np.ndarray
    y_eq: np.ndarray            # equality multipliers
    lam_ineq: np.ndarray        # multipliers of C x <= d
    z_lower: np.ndarray         # multipliers of x >= lb
    z_upper: np.ndarray         # multipliers of x <= ub
    status: str
    iterations: int
    kkt_residual: float
    gap: float


def solve_qp(H, g, A_eq=None, b_eq=None, C=None, d=None, lb=None, ub=None,
             tol: float = 1e-9, max_iter: int = 60) -> QPResult:
    """Solve the box/inequality/equality constrained QP described above."""
    H = _as_sparse(H)
    n = H.shape[0]
    g = np.asarray(g, dtype=float).ravel()
    if g.size != n:
        raise ValueError("g size does not match H")

    A_eq = _as_sparse(A_eq) if A_eq is not None else sp.csr_matrix((0, n))
    b_eq = np.asarray(b_eq, dtype=float).ravel() if b_eq is not None else np.zeros(0)
    C = _as_sparse(C) if C is not None else sp.csr_matrix((0, n))
    d = np.asarray(d, dtype=float).ravel() if d is not None else np.zeros(0)
    if A_eq.shape != (b_eq.size, n) or C.shape != (d.size, n):
        raise ValueError("constraint matrix/vector dimensions are inconsistent")

    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float).copy()
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float).copy()
    if np.any(lb > ub + 1e-12):
        raise ValueError("infeasible bounds: lb > ub")

    # pinned variables (lb == ub) become equality rows so the barrier stays interior
    pinned = np.isfinite(lb) & np.isfinite(ub) & (ub - lb < 1e-12)
    if np.any(pinned):
        idx = np.where(pinned)[0]
        P = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n))
        A_eq = sp.vstack([A_eq, P], format="csr")
        b_eq = np.concatenate([b_eq, lb[idx]])
        lb[idx], ub[idx] = -np.inf, np.inf

    return _mehrotra(H.tocsr(), g, A_eq.tocsr(), b_eq, C.tocsr(), d, lb, ub, tol, max_iter)


def _as_sparse(M):
    if M is None:
        return None
    if sp.issparse(M):
        return M.tocsr()
    return sp.csr_matrix(np.atleast_2d(np.asarray(M, dtype=float)))


def _mehrotra(H, g, A, b, C, d, lb, ub, tol, max_iter):
    n, me, mi = H.shape[0], A.shape[0], C.shape[0]
    has_lb, has_ub = np.isfinite(lb), np.isfinite(ub)
    nl, nu = int(has_lb.sum()), int(has_ub.sum())
    n_comp = nl + nu + mi

    # separate scales: stationarity rows scale with the gradient, primal
    # rows with the constraint data (penalty-sized g entries must not
    # loosen the feasibility test)
    s_dual = 1.0 + np.abs(g).max(initial=0.0)
    s_prim = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(d).max(initial=0.0))

    # strictly interior start: w and v must equal x - lb and ub - x exactly,
    # since the Newton steps only preserve (not restore) that identity
    x = np.zeros(n)
    both = has_lb & has_ub
    x[both] = 0.5 * (lb[both] + ub[both])
    x[has_lb & ~has_ub] = lb[has_lb & ~has_ub] + 1.0
    x[~has_lb & has_ub] = ub[~has_lb & has_ub] - 1.0
    y = np.zeros(me)
    s = np.maximum(d - C @ x, 1.0) if mi else np.zeros(0)
    lam = np.ones(mi)
    zl = np.where(has_lb, 1.0, 0.0)
    zu = np.where(has_ub, 1.0, 0.0)
    w = np.where(has_lb, x - lb, 1.0)
    v = np.where(has_ub, ub - x, 1.0)

    delta = 1e-9
    kkt = _KKTCache(H, A, C)
    lu = None
    status = MAX_ITER
    it = 0
    res_prev = np.inf
    stall = 0
    for it in range(1, max_iter + 1):
        r_stat = H @ x + g + A.T @ y + (C.T @ lam if mi else 0.0) - zl + zu
        r_eq = A @ x - b
        r_in = C @ x + s - d if mi else np.zeros(0)
        gap = (w[has_lb] @ zl[has_lb] + v[has_ub] @ zu[has_ub]
               + (s @ lam if mi else 0.0))
        mu = gap / max(n_comp, 1)

        res_d = np.abs(r_stat).max(initial=0.0) / s_dual
        res_p = max(np.abs(r_eq).max(initial=0.0),
                    np.abs(r_in).max(initial=0.0)) / s_prim
        if res_d < tol and res_p < tol and mu < tol * s_prim:
            status = OPTIMAL
            break
        # infeasible problems exhaust the barrier (mu -> 0) without closing
        # the primal residual; demand several such iterations before giving
        # up so slow early progress is not mistaken for infeasibility
        if n_comp > 0:
            exhausted = mu < 1e-11 * s_prim and res_p > 1e-6
        else:
            exhausted = res_p > 0.5 * res_prev and res_p > 1e-6
        stall = stall + 1 if exhausted else 0
        res_prev = res_p
        if stall >= 3:
            status = INFEASIBLE
            break

        dx_diag = zl / w * has_lb + zu / v * has_ub
        lam_s = lam / s if mi else np.zeros(0)
        lu = kkt.factor(dx_diag, lam_s, delta)
        if lu is None:        # singular KKT: bump regularization and retry
            delta *= 100.0
            continue

        def newton_step(rc_l, rc_u, rc_s):
            """One KKT solve for given complementarity targets."""
            rx = -r_stat + rc_l / w * has_lb - rc_u / v * has_ub
            rl = (-r_in - rc_s / lam) if mi else np.zeros(0)
            dx, dy, _ = _solve_kkt(lu, H, A, C, rx, -r_eq, rl, mi)
            dzl = (rc_l - zl * dx) / w
            dzu = (rc_u + zu * dx) / v
            ds = (-r_in - C @ dx) if mi else np.zeros(0)
            dlam = ((rc_s - lam * ds) / s) if mi else np.zeros(0)
            return dx, dy, dx.copy(), -dx, dzl, dzu, ds, dlam

        # affine predictor: aim at zero complementarity
        aff = newton_step(-(w * zl), -(v * zu), -(s * lam) if mi else np.zeros(0))
        dxa, dya, dwa, dva, dzla, dzua, dsa, dlaa = aff
        alpha_aff = _max_step(w, dwa, v, dva, zl, dzla, zu, dzua, s, dsa, lam, dlaa,
                              has_lb, has_ub)
        gap_aff = ((w + alpha_aff * dwa)[has_lb] @ (zl + alpha_aff * dzla)[has_lb]
                   + (v + alpha_aff * dva)[has_ub] @ (zu + alpha_aff * dzua)[has_ub]
                   + ((s + alpha_aff * dsa) @ (lam + alpha_aff * dlaa) if mi else 0.0))
        mu_aff = gap_aff / max(n_comp, 1)
        sigma = (mu_aff / max(mu, 1e-300)) ** 3 if mu > 0 else 0.1
        sigma = min(max(sigma, 1e-6), 0.99)

        # centering corrector with Mehrotra second-order terms
        rc_l = sigma * mu - w * zl - dwa * dzla
        rc_u = sigma * mu - v * zu - dva * dzua
        rc_s = (sigma * mu - s * lam - dsa * dlaa) if mi else np.zeros(0)
        dx, dy, dw, dv, dzl, dzu, ds, dlam = newton_step(rc_l, rc_u, rc_s)

        alpha = _max_step(w, dw, v, dv, zl, dzl, zu, dzu, s, ds, lam, dlam,
                          has_lb, has_ub)
        # full Newton steps when there is no boundary to respect
        alpha = min(alpha, 1.0) if n_comp == 0 else min(0.995 * alpha, 1.0)

        x += alpha * dx
        y += alpha * dy
        w += alpha * dw
        v += alpha * dv
        zl += alpha * dzl
        zu += alpha * dzu
        if mi:
            s += alpha * ds
            lam += alpha * dlam
        zl[~has_lb] = 0.0
        zu[~has_ub] = 0.0
        w[~has_lb] = 1.0
        v[~has_ub] = 1.0

    r_stat = H @ x + g + A.T @ y + (C.T @ lam if mi else 0.0) - zl + zu
    r_eq = A @ x - b
    r_in = np.maximum(C @ x - d, 0.0) if mi else np.zeros(0)
    kkt = max(np.abs(r_stat).max(initial=0.0), np.abs(r_eq).max(initial=0.0),
              np.abs(r_in).max(initial=0.0))
    gap = (w[has_lb] @ zl[has_lb] + v[has_ub] @ zu[has_ub] + (s @ lam if mi else 0.0))
    return QPResult(x=x, y_eq=y, lam_ineq=lam, z_lower=zl, z_upper=zu,
                    status=status, iterations=it, kkt_residual=float(kkt),
                    gap=float(gap))


class _KKTCache:
    """Assemble the KKT sparsity pattern once; later factorizations only
    rewrite the diagonal (barrier and regularization terms)."""

    def __init__(self, H, A, C):
        n, me, mi = H.shape[0], A.shape[0], C.shape[0]
        self.n, self.me, self.mi = n, me, mi
        m = n + me + mi
        # structural placeholder keeps every diagonal entry present
        hold = sp.diags(np.full(m, 1e-300))
        blocks = [[H, A.T, C.T if mi else None],
                  [A, None, None],
                  [C if mi else None, None, None]]
        if mi == 0:
            blocks = [[H, A.T], [A, None]]
        K = (sp.bmat(blocks, format="csc") + hold).tocsc()
        K.sort_indices()
        self.K = K
        self.base = K.data.copy()
        # locate each diagonal entry in the csc data array
        diag_pos = np.empty(m, dtype=np.int64)
        indptr, indices = K.indptr, K.indices
        for j in range(m):
            lo, hi = indptr[j], indptr[j + 1]
            diag_pos[j] = lo + np.searchsorted(indices[lo:hi], j)
        self.diag_pos = diag_pos

    def factor(self, dx_diag, lam_s, delta):
        data = self.base.copy()
        n, me, mi = self.n, self.me, self.mi
        data[self.diag_pos[:n]] += dx_diag + delta
        data[self.diag_pos[n:n + me]] += -delta
        if mi:
            data[self.diag_pos[n + me:]] += -1.0 / lam_s
        K = sp.csc_matrix((data, self.K.indices, self.K.indptr), shape=self.K.shape)
        try:
            return spla.splu(K)
        except RuntimeError:
            return None


def _solve_kkt(lu, H, A, C, rx, ry, rl, mi):
    n, me = H.shape[0], A.shape[0]
    rhs = np.concatenate([rx, ry, rl]) if mi else np.concatenate([rx, ry])
    sol = lu.solve(rhs)
    dx = sol[:n]
    dy = sol[n:n + me]
    dl = sol[n + me:] if mi else np.zeros(0)
    return dx, dy, dl


def _max_step(w, dw, v, dv, zl, dzl, zu, dzu, s, ds, lam, dlam, has_lb, has_ub):
    alpha = 1.0
    for val, dval, mask in ((w, dw, has_lb), (v, dv, has_ub), (zl, dzl, has_lb),
                            (zu, dzu, has_ub)):
        neg = (dval < 0) & mask
        if np.any(neg):
            alpha = min(alpha, np.min(-val[neg] / dval[neg]))
    for val, dval in ((s, ds), (lam, dlam)):
        neg = dval < 0
        if np.any(neg):
            alpha = min(alpha, np.min(-val[neg] / dval[neg]))
    return alpha
