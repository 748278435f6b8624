"""Dense convex QP with two-sided linear inequality constraints.

    minimise   0.5 x'Hx + g'x
    subject to lo <= C x <= hi

solved with the Goldfarb-Idnani dual active-set method. The method starts
from the unconstrained minimiser and adds violated constraints one at a
time, so no feasible starting point is needed and a problem whose
unconstrained minimiser is feasible costs a single Cholesky solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    C: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        n = self.g.shape[0]
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1, n)
        m = self.C.shape[0]
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=np.float64), (m,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=np.float64), (m,)).copy()
        if self.H.shape != (n, n):
            raise ValueError("H must be square and match g")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bounds must not exceed upper bounds")

    @classmethod
    def box(cls, H, g, lo, hi) -> "QpProblem":
        return cls(H, g, np.eye(len(g)), lo, hi)

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    lam_lo: np.ndarray          # multipliers of lo <= Cx, >= 0
    lam_hi: np.ndarray          # multipliers of Cx <= hi, >= 0
    active: list = field(default_factory=list)   # (row, "lo" | "hi")
    kkt: float = 0.0
    iterations: int = 0
    converged: bool = True
    status: str = "optimal"


def kkt_residual(qp: QpProblem, x, lam_lo, lam_hi) -> float:
    """Max of stationarity, primal infeasibility, complementarity and dual sign violations."""
    cx = qp.C @ x
    stat = qp.H @ x + qp.g - qp.C.T @ (lam_lo - lam_hi)
    infeas = np.concatenate([np.maximum(qp.lo - cx, 0.0), np.maximum(cx - qp.hi, 0.0), [0.0]])
    with np.errstate(invalid="ignore"):
        comp_lo = np.where(lam_lo > 0, lam_lo * (cx - qp.lo), 0.0)
        comp_hi = np.where(lam_hi > 0, lam_hi * (qp.hi - cx), 0.0)
    dual = np.concatenate([np.maximum(-lam_lo, 0.0), np.maximum(-lam_hi, 0.0), [0.0]])
    parts = [np.max(np.abs(stat), initial=0.0), np.max(infeas), np.max(np.abs(comp_lo), initial=0.0),
             np.max(np.abs(comp_hi), initial=0.0), np.max(dual)]
    return float(max(parts))


def solve_qp_box(qp: QpProblem, max_iter: int = 100, tol: float = 1e-12) -> QpSolution:
    """Goldfarb-Idnani dual active-set solve.

    ``tol`` is the constraint-violation threshold used to decide whether a
    constraint still needs to enter the active set. ``H`` must be positive
    definite. On the iteration limit the current (dual feasible) iterate is
    returned with ``converged=False``.
    """
    n = qp.g.shape[0]
    m = qp.C.shape[0]
    lo_rows = np.flatnonzero(np.isfinite(qp.lo))
    hi_rows = np.flatnonzero(np.isfinite(qp.hi))
    # unified form  N x >= b ; row j < len(lo_rows) is a lower bound
    N = np.vstack([qp.C[lo_rows], -qp.C[hi_rows]]) if m else np.zeros((0, n))
    b = np.concatenate([qp.lo[lo_rows], -qp.hi[hi_rows]])
    n_lo = len(lo_rows)

    L = np.linalg.cholesky(qp.H)
    Linv = np.linalg.solve(L, np.eye(n))
    Ginv = Linv.T @ Linv
    x = -(Ginv @ qp.g)

    active: list[int] = []
    u = np.zeros(0)
    iters = 0
    status = "optimal"
    converged = True
    scale = 1.0 + np.abs(b)

    while True:
        s = N @ x - b if len(b) else np.zeros(0)
        if active:
            s[active] = np.inf
        viol = s / scale
        if len(viol) == 0 or np.min(viol) >= -tol:
            break
        if iters >= max_iter:
            converged, status = False, "iteration limit"
            break
        p = int(np.argmin(viol))
        npv = N[p]
        u_p = 0.0
        added = False
        while not added:
            iters += 1
            gn = Ginv @ npv
            if active:
                Na = N[active].T
                GNa = Ginv @ Na
                M = Na.T @ GNa
                r = np.linalg.solve(M, GNa.T @ npv)
                z = gn - GNa @ r
            else:
                r = np.zeros(0)
                z = gn
            # dual step length: first active multiplier driven to zero
            t1, drop = math.inf, -1
            for k in np.flatnonzero(r > 0):
                ratio = u[k] / r[k]
                if ratio < t1:
                    t1, drop = ratio, int(k)
            zn = float(z @ npv)
            t2 = math.inf if zn <= 1e-14 * float(npv @ gn) else -(float(npv @ x) - b[p]) / zn
            t = min(t1, t2)
            if math.isinf(t):
                converged, status = False, "infeasible"
                break
            if math.isfinite(t2):
                x = x + t * z
            u = u - t * r
            u_p += t
            if t == t2:
                active.append(p)
                u = np.append(u, u_p)
                added = True
            else:
                del active[drop]
                u = np.delete(u, drop)
            if iters >= max_iter and not added:
                converged, status = False, "iteration limit"
                break
        if not converged:
            break

    lam_lo = np.zeros(m)
    lam_hi = np.zeros(m)
    act = []
    for j, mult in zip(active, u):
        if j < n_lo:
            row = int(lo_rows[j])
            lam_lo[row] = mult
            act.append((row, "lo"))
        else:
            row = int(hi_rows[j - n_lo])
            lam_hi[row] = mult
            act.append((row, "hi"))
    act.sort()
    return QpSolution(x, lam_lo, lam_hi, act, kkt_residual(qp, x, lam_lo, lam_hi), iters, converged, status)
