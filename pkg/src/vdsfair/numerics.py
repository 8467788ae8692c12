"""Small dense numerical kernels: a two-phase simplex LP solver, Euclidean
projection onto a polyhedral cone, and central-difference gradients.

Problem sizes here are tiny (tens of variables), so everything is dense and
written for determinism rather than speed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import lsq_linear, nnls

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class LinearProgram:
    """optimize c.y  s.t.  A_ub y <= b_ub,  A_eq y == b_eq,  y >= lower."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lower: np.ndarray | None = None
    maximize: bool = False

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_ub, self.b_ub = _rows(self.A_ub, self.b_ub, n, "ub")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "eq")
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float).ravel()
        if self.lower.size != n:
            raise ValueError("lower bounds do not match the number of variables")
        for arr in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq, self.lower):
            if not np.all(np.isfinite(arr)):
                raise ValueError("linear program has non-finite coefficients")

    @property
    def n_vars(self) -> int:
        return self.c.size


def _rows(A, b, n, what):
    if A is None or len(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[1] != n or A.shape[0] != b.size:
        raise ValueError(f"A_{what} shape {A.shape} inconsistent with {n} variables / {b.size} rows")
    return A, b


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None = None
    value: float | None = None
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class _Tableau:
    """Dense simplex tableau with Bland's anti-cycling rule (minimization)."""

    def __init__(self, A: np.ndarray, b: np.ndarray, tol: float):
        self.m, self.n = A.shape
        self.T = np.zeros((self.m + 1, self.n + 1))
        self.T[: self.m, : self.n] = A
        self.T[: self.m, -1] = b
        self.basis = np.zeros(self.m, dtype=int)
        self.tol = tol
        self.iterations = 0

    def set_objective(self, cost: np.ndarray):
        self.T[-1, :] = 0.0
        self.T[-1, : cost.size] = cost
        for row, j in enumerate(self.basis):
            if self.T[-1, j] != 0.0:
                self.T[-1] -= self.T[-1, j] * self.T[row]

    def pivot(self, row: int, col: int):
        T = self.T
        T[row] /= T[row, col]
        for k in range(T.shape[0]):
            if k != row and T[k, col] != 0.0:
                T[k] -= T[k, col] * T[row]
        self.basis[row] = col
        self.iterations += 1

    def run(self, allowed: np.ndarray, max_iter: int) -> str:
        T, tol = self.T, self.tol
        while self.iterations < max_iter:
            red = T[-1, :-1]
            cand = np.flatnonzero((red < -tol) & allowed)
            if cand.size == 0:
                return OPTIMAL
            col = int(cand[0])  # Bland: lowest index
            column = T[:-1, col]
            pos = column > tol
            if not pos.any():
                return UNBOUNDED
            ratios = np.full(self.m, np.inf)
            ratios[pos] = T[:-1, -1][pos] / column[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
            row = int(ties[np.argmin(self.basis[ties])])
            self.pivot(row, col)
        return ITERATION_LIMIT


def lp_solve(lp: LinearProgram, tol: float = 1e-10, max_iter: int = 50_000) -> LPResult:
    """Two-phase primal simplex; deterministic (Bland's rule)."""
    n = lp.n_vars
    # shift y = y' + lower so that y' >= 0
    b_ub = lp.b_ub - lp.A_ub @ lp.lower
    b_eq = lp.b_eq - lp.A_eq @ lp.lower
    m_ub, m_eq = lp.A_ub.shape[0], lp.A_eq.shape[0]
    m = m_ub + m_eq
    cost = -lp.c if lp.maximize else lp.c.copy()

    if m == 0:
        if np.any(cost < -tol):
            return LPResult(UNBOUNDED)
        y = lp.lower.copy()
        return LPResult(OPTIMAL, y, float(lp.c @ y))

    # columns: original (n) | slacks (m_ub) | artificials (m)
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = lp.A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = lp.A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1.0
    b = np.abs(b)
    scale = max(1.0, float(np.abs(A).max(initial=0.0)), float(b.max(initial=0.0)))
    ztol = tol * scale

    width = n + m_ub + m
    tab = _Tableau(np.hstack([A, np.eye(m)]), b, ztol)
    tab.basis[:] = np.arange(n + m_ub, width)
    phase1 = np.zeros(width)
    phase1[n + m_ub :] = 1.0
    tab.set_objective(phase1)
    status = tab.run(np.ones(width, dtype=bool), max_iter)
    if status == ITERATION_LIMIT:
        return LPResult(status, iterations=tab.iterations)
    if -tab.T[-1, -1] > ztol * max(1, m):
        return LPResult(INFEASIBLE, iterations=tab.iterations)

    # drive artificials out of the basis; drop redundant rows
    keep = []
    for row in range(m):
        j = tab.basis[row]
        if j < n + m_ub:
            keep.append(row)
            continue
        nz = np.flatnonzero(np.abs(tab.T[row, : n + m_ub]) > ztol)
        if nz.size:
            tab.pivot(row, int(nz[0]))
            keep.append(row)
    if len(keep) < m:
        rows = keep + [m]
        tab.T = tab.T[rows]
        tab.basis = tab.basis[keep]
        tab.m = len(keep)

    allowed = np.zeros(width, dtype=bool)
    allowed[: n + m_ub] = True
    full_cost = np.zeros(width)
    full_cost[:n] = cost
    tab.set_objective(full_cost)
    status = tab.run(allowed, max_iter)
    if status != OPTIMAL:
        return LPResult(status, iterations=tab.iterations)

    sol = np.zeros(width)
    sol[tab.basis] = tab.T[: tab.m, -1]
    y = np.maximum(sol[:n], 0.0) + lp.lower
    return LPResult(OPTIMAL, y, float(lp.c @ y), tab.iterations)


# ---------------------------------------------------------------------------
# cone projection


@dataclass
class ConeSpec:
    """{w : w.a <= 0 for a in ineq rows, w.a == 0 for a in eq rows}."""

    ineq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    eq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.ineq = np.atleast_2d(np.asarray(self.ineq, dtype=float))
        self.eq = np.atleast_2d(np.asarray(self.eq, dtype=float))
        width = max(self.ineq.shape[1], self.eq.shape[1])
        if self.ineq.size == 0:
            self.ineq = np.zeros((0, width))
        if self.eq.size == 0:
            self.eq = np.zeros((0, width))
        for rows in (self.ineq, self.eq):
            if rows.size and np.any(np.linalg.norm(rows, axis=1) == 0):
                raise ValueError("cone normals must be nonzero")

    def contains(self, w: np.ndarray, tol: float = 1e-10) -> bool:
        ok = True
        if self.ineq.size:
            ok &= bool(np.all(self.ineq @ w <= tol))
        if self.eq.size:
            ok &= bool(np.all(np.abs(self.eq @ w) <= tol))
        return ok


def _null_basis(rows: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis (n x k) of {w : rows @ w = 0}; dependent rows are fine."""
    if rows.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(rows)
    rank = int(np.sum(s > 1e-12 * s.max(initial=0.0)))
    return vt[rank:].T


def _unit_rows(rows: np.ndarray, n: int) -> np.ndarray:
    if rows.size == 0:
        return np.zeros((0, n))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def project_cone(v, cone: ConeSpec | None = None) -> np.ndarray:
    """Euclidean projection of v onto {w : ineq @ w <= 0, eq @ w == 0}.

    Uses the Moreau decomposition: v minus its projection onto the polar
    cone cone(ineq^T) + span(eq^T).  The equality part is eliminated by
    working inside null(eq); the remaining nonnegative least squares in the
    inequality multipliers is solved by Lawson-Hanson active sets.
    """
    v = np.asarray(v, dtype=float)
    if cone is None or (cone.ineq.size == 0 and cone.eq.size == 0):
        return v.copy()
    n = v.size
    # positive row scaling leaves the cone unchanged; unit rows keep ranks honest
    eq = _unit_rows(cone.eq, n)
    ineq = _unit_rows(cone.ineq, n)
    Z = _null_basis(eq, n)
    if Z.shape[1] == 0:
        return np.zeros(n)
    vz = Z.T @ v
    if ineq.shape[0] == 0:
        return Z @ vz
    Gz = ineq @ Z  # inequality normals expressed in null-space coordinates
    if np.all(Gz @ vz <= 0.0):
        return Z @ vz
    mu, _ = nnls(Gz.T, vz, maxiter=50 * max(10, Gz.shape[0]))
    if not _polar_kkt(Gz, vz, mu):
        # scipy's nnls can stop at a non-optimal point on ill-conditioned
        # normals while reporting a zero residual; bounded least squares is
        # slower but reliable here
        mu = lsq_linear(Gz.T, vz, bounds=(0.0, np.inf), method="bvls", tol=1e-15).x
    w = Z @ (vz - Gz.T @ mu)
    return w


def _polar_kkt(G: np.ndarray, v: np.ndarray, mu: np.ndarray, tol: float = 1e-12) -> bool:
    """Optimality of mu >= 0 for min ||v - G^T mu||: the remainder lies in the cone
    and is orthogonal to the active normals."""
    w = v - G.T @ mu
    scale = max(1.0, float(np.linalg.norm(v)))
    g = G @ w
    return bool(np.all(g <= tol * scale) and np.all(np.abs(g[mu > 0]) <= tol * scale))


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    point = np.asarray(point, dtype=float)
    grad = np.empty_like(point)
    for k in range(point.size):
        e = np.zeros_like(point)
        e[k] = step
        hi, lo = f(point + e), f(point - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            logger.warning("non-finite objective at coordinate %d (step %g)", k, step)
        grad[k] = (hi - lo) / (2 * step)
    return grad
