"""Merit-function solver for the per-server alpha-fair game.

The Nash conditions are written as a complementarity system in (x, lambda):
capacity slacks f_{i,r} = c_{i,r} - sum_n x_{n,i} d_{n,r} and stationarity
residuals f_{n,i} = sum_r lambda_{i,r} d_{n,r} - g_i'(x_n / (phi_n gamma_{n,i})) / gamma_{n,i}.
Complementarity of (x_{n,i}, f_{n,i}) is measured with the Fischer-Burmeister
function and the squared residuals are summed into the merit Psi, which is
driven to zero by projected descent that keeps every iterate feasible.

Variables live only on eligible (user, server) pairs.  Public helpers accept
dense (N, K) allocation matrices; the solver itself works on the flat pair
vector.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .model import SATURATION_TOL, Allocation, ClusterSpec, is_feasible, uniform_allocation, usage
from .numerics import ConeSpec, LinearProgram, lp_solve, project_cone
from .utility import Z_MIN, ServerUtility, UtilityDomainError, UtilityParams, g_double_prime, g_prime

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
STALLED = "stalled"

SNAP = 1e-12


# ---------------------------------------------------------------------------
# Fischer-Burmeister pieces


def fb(a, b):
    """sqrt(a^2 + b^2) - a - b; zero exactly when a >= 0, b >= 0, ab = 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.hypot(a, b)
    s = a + b
    # r - s = -2ab / (r + s) avoids cancellation when both are large and positive
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(s > 0, -2.0 * a * b / np.where(s > 0, r + s, 1.0), r - s)
    return out if out.ndim else float(out)


def psi(a, b):
    return 0.5 * fb(a, b) ** 2


def _fb_slopes(a, b):
    """(a/r - 1, b/r - 1) with r = hypot(a, b), evaluated without cancellation;
    the generalized value 1/sqrt(2) - 1 is used at the origin."""
    r = np.hypot(a, b)
    live = r > 0
    safe = np.where(live, r, 1.0)

    def one(p, q):
        with np.errstate(divide="ignore", invalid="ignore"):
            near = -(q * q) / ((p + safe) * safe)
        return np.where(live, np.where(p > 0, near, p / safe - 1.0), 1.0 / math.sqrt(2.0) - 1.0)

    return one(a, b), one(b, a), live


def psi_partials(a, b):
    """(d psi/da, d psi/db); both taken as 0 at the origin."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ea, eb, live = _fb_slopes(a, b)
    v = fb(a, b)
    da = np.where(live, v * ea, 0.0)
    db = np.where(live, v * eb, 0.0)
    if da.ndim == 0:
        return float(da), float(db)
    return da, db


# ---------------------------------------------------------------------------
# residual mappings

_EXP_CAP = 600.0


class _Pairs:
    """Flat view of the eligible pairs with per-pair constants cached.

    With normalized=True the stationarity residual of each pair is divided
    by the positive factor g'(z)/gamma, giving gamma * price / g'(z) - 1.  The
    complementarity system keeps the same solutions but every residual is
    O(1), which matters once alpha is large and g' spans many decades.
    """

    def __init__(self, cluster: ClusterSpec, params: UtilityParams, normalized: bool = False):
        if len(params) != cluster.n_servers:
            raise ValueError(f"{len(params)} utility entries for {cluster.n_servers} servers")
        self.cluster = cluster
        self.params = params
        self.normalized = normalized
        self.n, self.i = cluster.pairs()
        self.P = self.n.size
        alpha, a_coef, b_coef = params.arrays()
        self.alpha = alpha[self.i]
        self.a_coef = a_coef[self.i]
        self.b_coef = b_coef[self.i]
        self.gamma = cluster.gamma[self.n, self.i]
        self.phi = cluster.weights[self.n]
        self.scale = self.phi * self.gamma  # z = x_n / scale
        self.d = cluster.demand[self.n]  # (P, M)
        # per-server slices into the pair vector (pairs are user-major)
        self.at = [np.flatnonzero(self.i == k) for k in range(cluster.n_servers)]

    def flatten(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)[self.n, self.i]

    def dense(self, xp: np.ndarray) -> np.ndarray:
        out = np.zeros((self.cluster.n_users, self.cluster.n_servers))
        out[self.n, self.i] = xp
        return out

    def totals(self, xp: np.ndarray) -> np.ndarray:
        return np.bincount(self.n, weights=xp, minlength=self.cluster.n_users)

    def _z(self, xp):
        z = self.totals(xp)[self.n] / self.scale
        if np.any(~(z > Z_MIN)):
            raise UtilityDomainError("a user with eligible servers has no tasks")
        return z

    def _log_gprime(self, z):
        lz = np.log(z)
        with np.errstate(divide="ignore"):
            t1 = self.alpha * (np.log(self.a_coef) - lz)
            t2 = np.log(self.b_coef) - lz
        return np.logaddexp(t1, t2)

    def parts(self, xp: np.ndarray, lam: np.ndarray):
        """(f, h, c): residual per pair, its derivative with respect to the
        owner's total x_n, and the coefficient c with df/dlambda_{i,r} = c d_{n,r}."""
        z = self._z(xp)
        price = np.einsum("pm,pm->p", lam[self.i], self.d)
        if not self.normalized:
            gp = g_prime(self.alpha, self.a_coef, self.b_coef, z)
            h = -g_double_prime(self.alpha, self.a_coef, self.b_coef, z) / (self.phi * self.gamma**2)
            return price - gp / self.gamma, h, np.ones(self.P)
        lc = np.log(self.gamma) - self._log_gprime(z)
        c = np.exp(np.minimum(lc, _EXP_CAP))
        with np.errstate(over="ignore"):
            scaled = np.minimum(price * c, np.exp(_EXP_CAP))
        # g''/g' without forming either factor
        u = self.alpha * (np.log(self.a_coef) - np.log(z))
        with np.errstate(divide="ignore"):
            v = np.log(self.b_coef) - np.log(z)
        w = 1.0 / (1.0 + np.exp(np.clip(v - u, -_EXP_CAP, _EXP_CAP)))  # share of the power term
        ratio = -(self.alpha * w + (1.0 - w)) / z
        h = -scaled * ratio / self.scale
        return scaled - 1.0, h, c

    def residuals(self, xp: np.ndarray, lam: np.ndarray):
        f, _, _ = self.parts(xp, lam)
        return f

    def merit(self, xp: np.ndarray, lam: np.ndarray) -> float:
        return float(np.sum(psi(xp, self.residuals(xp, lam))))

    def gradient(self, xp: np.ndarray, lam: np.ndarray):
        f, h, c = self.parts(xp, lam)
        da, db = psi_partials(xp, f)
        da, db = np.atleast_1d(da), np.atleast_1d(db)
        coupling = np.bincount(self.n, weights=db * h, minlength=self.cluster.n_users)
        gx = da + coupling[self.n]
        glam = np.zeros_like(lam)
        np.add.at(glam, self.i, (db * c)[:, None] * self.d)
        return gx, glam

    def jacobian(self, xp: np.ndarray, lam: np.ndarray):
        """(Phi, J): Fischer-Burmeister residual per pair and its Jacobian
        with respect to (x pairs, lambda flattened row-major)."""
        f, h, c = self.parts(xp, lam)
        ea, eb, _ = _fb_slopes(xp, f)
        K, M = lam.shape
        J = np.zeros((self.P, self.P + K * M))
        same_user = self.n[:, None] == self.n[None, :]
        J[:, : self.P] = same_user * (eb * h)[:, None]
        J[np.arange(self.P), np.arange(self.P)] += ea
        cols = self.P + self.i[:, None] * M + np.arange(M)[None, :]
        J[np.arange(self.P)[:, None], cols] = (eb * c)[:, None] * self.d
        return fb(xp, f), J

    def gn_diagonal(self, xp: np.ndarray, lam: np.ndarray):
        """Squared column norms of the Jacobian of the Fischer-Burmeister
        residual vector, for x (per pair) and lambda (per server, resource)."""
        f, h, c = self.parts(xp, lam)
        ea, eb, _ = _fb_slopes(xp, f)
        cross = np.bincount(self.n, weights=(eb * h) ** 2, minlength=self.cluster.n_users)
        dx = ea**2 + 2.0 * ea * eb * h + cross[self.n]
        dl = np.zeros_like(lam)
        np.add.at(dl, self.i, (eb * c)[:, None] ** 2 * self.d**2)
        return dx, dl


def f_capacity(cluster: ClusterSpec, x, i: int, r: int) -> float:
    return float(cluster.capacity[i, r] - np.asarray(x)[:, i] @ cluster.demand[:, r])


def f_user(cluster: ClusterSpec, params: UtilityParams, x, lam, n: int, i: int) -> float:
    if not cluster.eligible[n, i]:
        raise ValueError(f"user {n} is not eligible at server {i}")
    x = np.asarray(x, dtype=float)
    total = x[n].sum()
    if not total > 0:
        raise UtilityDomainError(f"user {cluster.users[n].id} has no tasks")
    p = params[i]
    g = cluster.gamma[n, i]
    z = total / (cluster.weights[n] * g)
    return float(np.asarray(lam)[i] @ cluster.demand[n] - g_prime(p.alpha, p.a_coef, p.b_coef, z) / g)


def merit(cluster: ClusterSpec, params: UtilityParams, x, lam) -> float:
    pr = _Pairs(cluster, params)
    return pr.merit(pr.flatten(x), np.asarray(lam, dtype=float))


def merit_gradient(cluster: ClusterSpec, params: UtilityParams, x, lam):
    """Returns (dense (N, K) x-gradient with zeros off the eligible pairs, (K, M) lambda-gradient)."""
    pr = _Pairs(cluster, params)
    gx, glam = pr.gradient(pr.flatten(x), np.asarray(lam, dtype=float))
    return pr.dense(gx), glam


# ---------------------------------------------------------------------------
# configuration, state, result


ALPHA_LADDER = (1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 18.0, 25.0, 35.0, 50.0, 70.0, 100.0)


@dataclass
class SolverConfig:
    epsilon_stop: float = 1e-6
    # the metric direction is a step-length estimate and shrinks with the
    # error, so it stops on its own, much smaller threshold
    epsilon_stop_metric: float = 1e-14
    # metric direction only: stall when the merit fell by less than this
    # fraction over the last stagnation_window iterations
    stagnation_window: int = 50
    stagnation_ratio: float = 1e-3
    merit_tol: float = 1e-10
    max_iters: int = 100_000
    initial_step: float = 1.0
    backtrack_factor: float = 0.5
    max_backtracks: int = 60
    saturation_tol: float = SATURATION_TOL
    # "gradient": projected gradient in x plus the multiplier rule for lambda.
    # "gauss-newton": projected steepest descent in the J^T J + mu I metric.
    direction: str = "gauss-newton"
    # mu after Jacobi equilibration; None uses min(1, sqrt(2 Psi))
    damping: float | None = 1e-10
    # "diagonal" rescales gradient directions by the inverse Gauss-Newton diagonal
    scaling: str = "none"
    # divide each stationarity residual by g'(z)/gamma (same solutions, O(1) residuals)
    normalize: bool = True
    # solve increasing alpha stages, warm-starting each from the previous one
    continuation: bool = True
    continuation_above: float = 3.0
    # "fixed" restarts every search at initial_step; "adaptive" at 4x the last step
    step_rule: str = "fixed"
    # after merit_tol is met, up to polish_iters more steps while merit > polish_tol
    polish_tol: float = 1e-24
    polish_iters: int = 30
    # Psi can have stationary points on the faces that are not solutions.  A
    # run from the default start that stalls is retried from the barrier
    # heuristic's point (at this epsilon, None to skip), then from these
    # fractions of the uniform split.  Before each of those, up to
    # restart_reassign retries start from the stalled point with its tasks
    # re-placed by an LP (see _reassign).
    restart_reassign: int = 3
    restart_barrier: float | None = 1e-3
    restart_fractions: tuple[float, ...] = (0.9, 0.1)
    record_iterates: bool = False
    time_limit: float | None = None

    def __post_init__(self):
        for name in ("epsilon_stop", "epsilon_stop_metric", "merit_tol", "initial_step", "saturation_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.restart_reassign < 0:
            raise ValueError("restart_reassign must be >= 0")
        if self.restart_barrier is not None and not self.restart_barrier > 0:
            raise ValueError("restart_barrier must be positive or None")
        if self.stagnation_window < 1 or not 0 <= self.stagnation_ratio < 1:
            raise ValueError("stagnation_window must be >= 1 and stagnation_ratio in [0, 1)")
        if any(not 0 < f <= 1 for f in self.restart_fractions):
            raise ValueError("restart_fractions must lie in (0, 1]")
        if self.polish_iters < 0 or not self.polish_tol >= 0:
            raise ValueError("polish_iters and polish_tol must be non-negative")
        if self.max_iters < 1 or self.max_backtracks < 1:
            raise ValueError("max_iters and max_backtracks must be >= 1")
        if self.damping is not None and not self.damping > 0:
            raise ValueError("damping must be positive or None")
        if self.step_rule not in ("fixed", "adaptive"):
            raise ValueError("step_rule must be 'fixed' or 'adaptive'")
        if self.direction not in ("gradient", "gauss-newton"):
            raise ValueError("direction must be 'gradient' or 'gauss-newton'")
        if self.scaling not in ("none", "diagonal"):
            raise ValueError("scaling must be 'none' or 'diagonal'")

    @classmethod
    def plain(cls, **kw) -> "SolverConfig":
        """Unscaled projected gradient on the raw merit, single stage."""
        base = dict(direction="gradient", scaling="none", normalize=False, continuation=False)
        base.update(kw)
        return cls(**base)


@dataclass
class SolverState:
    xp: np.ndarray  # flat pair vector
    lam: np.ndarray  # (K, M)
    merit: float
    gx: np.ndarray
    glam: np.ndarray
    saturated: np.ndarray  # (K, M) bool
    scale_x: np.ndarray | None = None  # diagonal metric, None for plain gradient
    scale_lam: np.ndarray | None = None


@dataclass
class IterateAudit:
    feasible: bool
    lambda_support_ok: bool
    min_x: float


@dataclass
class SolveResult:
    allocation: Allocation
    multipliers: np.ndarray
    merit_history: list[float]
    iterations: int
    status: str
    diagnostics: dict = field(default_factory=dict)
    iterates: list[IterateAudit] = field(default_factory=list)
    elapsed: float = 0.0
    stage_histories: list[list[float]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_dict(self, cluster: ClusterSpec) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "elapsed_seconds": self.elapsed,
            "merit": self.merit_history[-1] if self.merit_history else None,
            "merit_history": self.merit_history,
            "totals": dict(zip(cluster.user_ids, self.allocation.totals.tolist())),
            "allocation": {
                u: dict(zip(cluster.server_ids, row)) for u, row in zip(cluster.user_ids, self.allocation.tasks.tolist())
            },
            "multipliers": {
                s: dict(zip(cluster.resources, row)) for s, row in zip(cluster.server_ids, self.multipliers.tolist())
            },
            "diagnostics": self.diagnostics,
        }


def _saturation(cluster: ClusterSpec, pr: _Pairs, xp: np.ndarray, tol: float) -> np.ndarray:
    slack = cluster.capacity - usage(cluster, pr.dense(xp))
    return (slack <= tol * np.maximum(1.0, cluster.capacity)) & (cluster.capacity > 0)


def _make_state(cluster, pr: _Pairs, xp, lam, tol, scaled: bool = False) -> SolverState:
    sat = _saturation(cluster, pr, xp, tol)
    if np.any(lam[~sat] != 0):
        logger.debug("resetting %d multipliers off the saturated set", int(np.count_nonzero(lam[~sat])))
        lam = np.where(sat, lam, 0.0)
    gx, glam = pr.gradient(xp, lam)
    state = SolverState(xp, lam, pr.merit(xp, lam), gx, glam, sat)
    if scaled:
        dx, dl = pr.gn_diagonal(xp, lam)
        floor = 1e-12 * max(float(dx.max(initial=0.0)), float(dl.max(initial=0.0)), 1e-300)
        state.scale_x = 1.0 / np.maximum(dx, floor)
        state.scale_lam = 1.0 / np.maximum(dl, floor)
    return state


# ---------------------------------------------------------------------------
# directions


def _server_cone(pr: _Pairs, state: SolverState, k: int, pinned=None) -> ConeSpec:
    idx = pr.at[k]
    dem = pr.d[idx]  # rows: users at k, cols: resources
    sat = state.saturated[k]
    hold = state.lam[k] > 0
    if pinned is not None:
        hold = hold | pinned[k]
    eq = [dem[:, r] for r in np.flatnonzero(sat & hold)]
    ineq = [dem[:, r] for r in np.flatnonzero(sat & ~hold)]
    # nonnegativity faces for coordinates already at zero
    for j in np.flatnonzero(state.xp[idx] <= 0.0):
        e = np.zeros(idx.size)
        e[j] = -1.0
        ineq.append(e)
    eq = [row for row in eq if np.any(row)]
    ineq = [row for row in ineq if np.any(row)]
    n = idx.size
    return ConeSpec(np.array(ineq, dtype=float).reshape(len(ineq), n), np.array(eq, dtype=float).reshape(len(eq), n))


def direction_x(pr: _Pairs, state: SolverState) -> np.ndarray:
    """Per server, projection of -grad_x Psi onto the tangent cone of the
    saturated faces (equality where lambda > 0, inequality where lambda = 0)."""
    v = np.zeros(pr.P)
    for k, idx in enumerate(pr.at):
        if idx.size == 0:
            continue
        cone = _server_cone(pr, state, k)
        if state.scale_x is None:
            v[idx] = project_cone(-state.gx[idx], cone)
        else:
            # projection in the metric diag(1/s): substitute v = sqrt(s) u
            root = np.sqrt(state.scale_x[idx])
            cone = ConeSpec(cone.ineq * root, cone.eq * root)
            v[idx] = root * project_cone(-root * state.gx[idx], cone)
    # the cone already forbids v < 0 where x = 0; drop roundoff residue
    v[(state.xp <= 0.0) & (v < 0.0)] = 0.0
    return v


def _joint_cone(pr: _Pairs, state: SolverState, pinned=None) -> ConeSpec:
    """Tangent cone of the whole iterate (x pairs, then lambda row-major).

    pinned marks saturated rows with lambda = 0 whose usage is held fixed."""
    K, M = state.lam.shape
    width = pr.P + K * M
    ineq, eq = [], []
    for k, idx in enumerate(pr.at):
        cone = _server_cone(pr, state, k, pinned)
        for rows, out in ((cone.ineq, ineq), (cone.eq, eq)):
            for row in rows:
                full = np.zeros(width)
                full[idx] = row
                out.append(full)
    for k in range(K):
        for r in range(M):
            e = np.zeros(width)
            e[pr.P + k * M + r] = 1.0
            if not state.saturated[k, r]:
                eq.append(e)
            elif state.lam[k, r] <= 0.0:
                ineq.append(-e)
    return ConeSpec(np.array(ineq, dtype=float).reshape(len(ineq), width), np.array(eq, dtype=float).reshape(len(eq), width))


def direction_metric(pr: _Pairs, state: SolverState, damping: float | None = None):
    """Projected descent in the Levenberg-Marquardt metric J^T J + mu I.

    The steepest-descent direction in that metric, projected (in the same
    metric) onto the tangent cone, is still a descent direction for Psi and
    keeps the iterate on its saturated faces; it reduces to the plain
    projected gradient as mu grows."""
    phi, J = pr.jacobian(state.xp, state.lam)
    g = np.concatenate([state.gx, state.glam.ravel()])
    H = J.T @ J
    # Jacobi equilibration so the damping acts on comparable scales
    diag = np.sqrt(np.maximum(np.diag(H), 0.0))
    pos = diag > 0
    scale = np.where(pos, 1.0 / np.where(pos, diag, 1.0), 1.0 / max(1.0, float(diag.max(initial=0.0))))
    Hs = H * scale[:, None] * scale[None, :]
    mu = damping if damping is not None else min(1.0, math.sqrt(2.0 * state.merit))
    Hs[np.diag_indices_from(Hs)] += max(mu, 1e-12)
    L = np.linalg.cholesky(Hs)
    # v = S w, minimize 0.5 w^T Hs w + (S g)^T w over the cone; substitute u = L^T w
    gs = scale * g
    q = -np.linalg.solve(L, gs)
    to_w = lambda rows: np.linalg.solve(L, (rows * scale).T).T  # rows S L^{-T}
    # A saturated row with lambda = 0 may either release capacity or raise its
    # multiplier, not both: the merit only sees lambda while the row stays
    # saturated.  Rows doing both are pinned at their usage and re-solved.
    pinned = np.zeros(state.lam.shape, dtype=bool)
    free = state.saturated & (state.lam <= 0.0)
    for _ in range(pinned.size + 1):
        cone = _joint_cone(pr, state, pinned)
        u = project_cone(q, ConeSpec(to_w(cone.ineq), to_w(cone.eq)))
        v = scale * np.linalg.solve(L.T, u)
        vx = v[: pr.P]
        vl = v[pr.P :].reshape(state.lam.shape)
        release = usage(pr.cluster, pr.dense(vx)) < 0.0
        both = free & ~pinned & (vl > 0.0) & release
        if not both.any():
            break
        pinned |= both
    vx[(state.xp <= 0.0) & (vx < 0.0)] = 0.0
    vl = np.where(state.saturated, vl, 0.0)
    vl[(state.lam <= 0.0) & (vl < 0.0)] = 0.0
    return vx, vl


def direction_lambda(pr: _Pairs, state: SolverState) -> np.ndarray:
    g = state.glam
    beta = np.zeros_like(g)
    for k, idx in enumerate(pr.at):
        beta[k] = -(state.gx[idx] @ pr.d[idx])
    step = (-beta * g > 0).astype(float)
    v = -g + beta * step
    if state.scale_lam is not None:
        v = v * state.scale_lam
    v = np.where(state.lam > 0, v, np.maximum(v, 0.0))
    return np.where(state.saturated, v, 0.0)


# ---------------------------------------------------------------------------
# line search


@dataclass
class _Step:
    eta: float
    state: SolverState | None
    trials: int


def _step_cap(cluster: ClusterSpec, pr: _Pairs, state: SolverState, vx, vl, tol):
    """Largest step keeping x >= 0, lambda >= 0 and unsaturated capacities intact.

    Returns (cap, snap) where snap describes what to set exactly at the cap."""
    cap = math.inf
    dx = pr.dense(vx)
    rate = usage(cluster, dx)  # (K, M) growth of consumption
    slack = cluster.capacity - usage(cluster, pr.dense(state.xp))
    grow = (~state.saturated) & (rate > 0) & (cluster.capacity > 0)
    if grow.any():
        cap = min(cap, float(np.min(np.maximum(slack[grow], 0.0) / rate[grow])))
    neg = vx < 0
    if neg.any():
        cap = min(cap, float(np.min(state.xp[neg] / -vx[neg])))
    negl = vl < 0
    if negl.any():
        cap = min(cap, float(np.min(state.lam[negl] / -vl[negl])))
    return cap


def _pull_inside(cluster, pr: _Pairs, xp, tol):
    """Shrink a server's tasks by the factor that undoes roundoff drift past a
    saturated face; overshoots larger than tol are rejected (None)."""
    used = usage(cluster, pr.dense(xp))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(used > cluster.capacity, cluster.capacity / used, 1.0)
    shrink = ratio.min(axis=1)
    if np.any(shrink < 1.0 - tol):
        return None
    if np.all(shrink == 1.0):
        return xp
    return xp * shrink[pr.i]


def line_search(
    cluster, pr: _Pairs, state: SolverState, vx, vl, config: SolverConfig, eta0: float, scaled: bool = False
) -> _Step:
    """Backtrack eta0 * beta^k (capped at the first face hit) until Psi
    strictly decreases with x >= 0, lambda >= 0 and capacities respected."""
    cap = _step_cap(cluster, pr, state, vx, vl, config.saturation_tol)
    trials = 0
    eta = eta0
    last = None
    for _ in range(config.max_backtracks + 1):
        t = min(eta, cap)
        eta *= config.backtrack_factor
        if t == last or not t > 0:
            continue
        last = t
        trials += 1
        xp = state.xp + t * vx
        lam = state.lam + t * vl
        # land exactly on faces reached up to roundoff
        xp[np.abs(xp) <= SNAP * np.maximum(1.0, np.abs(state.xp))] = 0.0
        lam[np.abs(lam) <= SNAP * np.maximum(1.0, np.abs(state.lam))] = 0.0
        xp = np.maximum(xp, 0.0)
        lam = np.maximum(lam, 0.0)
        if np.any(pr.totals(xp) <= 0):
            continue
        xp = _pull_inside(cluster, pr, xp, config.saturation_tol)
        if xp is None:
            continue
        try:
            cand = _make_state(cluster, pr, xp, lam, config.saturation_tol, scaled)
        except (UtilityDomainError, FloatingPointError):
            continue
        if np.isfinite(cand.merit) and cand.merit < state.merit:
            return _Step(t, cand, trials)
    return _Step(0.0, None, trials)


# ---------------------------------------------------------------------------
# driver


def initialize(cluster: ClusterSpec, config: SolverConfig | None = None):
    """Half the weighted uniform split: strictly interior, so lambda = 0 is admissible."""
    x = 0.5 * uniform_allocation(cluster).tasks
    lam = np.zeros((cluster.n_servers, cluster.n_resources))
    return x, lam


def reconstruct_multipliers(
    cluster: ClusterSpec,
    params: UtilityParams,
    x,
    saturation_tol: float = SATURATION_TOL,
    active_share: float = 1e-3,
) -> np.ndarray:
    """Least-squares multipliers for a given allocation.

    At each server, lambda >= 0 on the saturated resources is fitted to the
    stationarity equations sum_r lambda_r d_{n,r} = g'(z_{n,i}) / gamma_{n,i}
    of the pairs carrying at least active_share of their user's tasks; each
    equation is divided by its right side so all users weigh equally.
    """
    pr = _Pairs(cluster, params)
    xp = pr.flatten(x)
    sat = _saturation(cluster, pr, xp, saturation_tol)
    lam = np.zeros((cluster.n_servers, cluster.n_resources))
    totals = pr.totals(xp)
    if np.any(totals[pr.n] <= 0):
        raise UtilityDomainError("multipliers need positive totals for every user")
    z = totals[pr.n] / pr.scale
    rhs = g_prime(pr.alpha, pr.a_coef, pr.b_coef, z) / pr.gamma
    for k, idx in enumerate(pr.at):
        act = idx[xp[idx] > active_share * totals[pr.n[idx]]]
        rs = np.flatnonzero(sat[k])
        if act.size == 0 or rs.size == 0:
            continue
        A = pr.d[np.ix_(act, rs)] / rhs[act, None]
        sol, _ = nnls(A, np.ones(act.size))
        lam[k, rs] = sol
    return lam


def _diagnostics(cluster, pr: _Pairs, state: SolverState) -> dict:
    raw = _Pairs(cluster, pr.params) if pr.normalized else pr
    f = raw.residuals(state.xp, state.lam)
    slack = cluster.capacity - usage(cluster, pr.dense(state.xp))
    comp_user = float(np.max(np.abs(np.minimum(state.xp, f)))) if pr.P else 0.0
    cap_mask = cluster.capacity > 0
    comp_cap = float(np.max(np.abs(state.lam * slack)[cap_mask], initial=0.0))
    positive = (state.lam > 0).sum(axis=1)
    degenerate = state.saturated & (state.lam == 0)
    return {
        "complementarity_user": comp_user,
        "complementarity_capacity": comp_cap,
        "raw_merit": raw.merit(state.xp, state.lam),
        "positive_multipliers": dict(zip(cluster.server_ids, positive.tolist())),
        "single_positive_multiplier": bool(np.all(positive <= 1)),
        "degenerate_saturation": bool(degenerate.any()),
        "degenerate_pairs": [[cluster.server_ids[k], cluster.resources[r]] for k, r in zip(*np.nonzero(degenerate))],
    }


@dataclass
class _Stage:
    state: SolverState
    history: list[float]
    audits: list[IterateAudit]
    iterations: int
    status: str
    stall_reason: str | None


def _iterate(cluster, pr: _Pairs, x0, lam0, config: SolverConfig, t0: float) -> _Stage:
    scaled = config.direction == "gradient" and config.scaling == "diagonal"
    with np.errstate(over="raise", invalid="raise"):
        state = _make_state(cluster, pr, pr.flatten(x0), np.array(lam0, dtype=float), config.saturation_tol, scaled)
    history = [state.merit]
    audits: list[IterateAudit] = []

    def audit(s: SolverState):
        if config.record_iterates:
            audits.append(
                IterateAudit(
                    bool(is_feasible(cluster, Allocation(pr.dense(s.xp)))),
                    bool(np.all(s.lam >= 0) and np.all(s.lam[~s.saturated] == 0)),
                    float(s.xp.min(initial=0.0)),
                )
            )

    audit(state)
    status, reason = MAX_ITERS, None
    eta_prev = None
    it = 0
    polish = 0
    while True:
        if state.merit <= config.merit_tol:
            status = CONVERGED
            if state.merit <= config.polish_tol or polish >= config.polish_iters:
                break
            polish += 1
        elif it >= config.max_iters:
            break
        elif (
            config.direction == "gauss-newton"
            and len(history) > config.stagnation_window
            and state.merit > (1.0 - config.stagnation_ratio) * history[-1 - config.stagnation_window]
        ):
            status, reason = STALLED, "stagnation"
            break
        if config.time_limit is not None and time.perf_counter() - t0 > config.time_limit:
            reason = None if status == CONVERGED else "time_limit"
            break
        with np.errstate(over="raise", invalid="raise"):
            try:
                if config.direction == "gauss-newton":
                    vx, vl = direction_metric(pr, state, config.damping)
                else:
                    vx, vl = direction_x(pr, state), direction_lambda(pr, state)
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                if status != CONVERGED:
                    status, reason = STALLED, f"direction: {exc}"
                break
        norm = math.sqrt(float(vx @ vx) + float(np.sum(vl * vl)))
        if status == CONVERGED and not norm > 0:
            break
        eps = config.epsilon_stop_metric if config.direction == "gauss-newton" else config.epsilon_stop
        if status != CONVERGED and norm <= eps:
            status, reason = STALLED, "direction_norm"
            break
        if config.step_rule == "fixed" or eta_prev is None:
            eta0 = config.initial_step
        else:
            eta0 = eta_prev / config.backtrack_factor**2
        with np.errstate(over="raise", invalid="raise"):
            step = line_search(cluster, pr, state, vx, vl, config, eta0, scaled)
        if step.state is None:
            if status != CONVERGED:
                status, reason = STALLED, "line_search"
            break
        eta_prev = step.eta
        state = step.state
        history.append(state.merit)
        audit(state)
        it += 1
    if reason:
        logger.info("stage stopped (%s) after %d iterations, merit %.3g", reason, it, state.merit)
    return _Stage(state, history, audits, it, status, reason)


def _ladder(params: UtilityParams, above: float) -> list[UtilityParams]:
    top = max(p.alpha for p in params.per_server)
    if top <= above:
        return [params]
    steps = [a for a in ALPHA_LADDER if a < top] + [top]
    out = []
    for a in steps:
        out.append(
            UtilityParams(tuple(ServerUtility(min(p.alpha, a), p.a_coef, p.b_coef) for p in params.per_server))
        )
    return out


def _shrink_into(cluster: ClusterSpec, x: np.ndarray) -> np.ndarray:
    used = x.T @ cluster.demand
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(used > cluster.capacity, cluster.capacity / used, 1.0)
    return x * ratio.min(axis=1)[None, :]


def _reassign(cluster: ClusterSpec, pr: _Pairs, state: SolverState):
    """Same totals, tasks moved to where their residual is lowest.

    Psi is flat along moves that keep every user's total (residuals depend
    on totals and prices only), so the descent cannot leave a placement in
    which some user sits at an overpriced server.  The LP min sum f x over
    placements with the current totals does that move in one go."""
    rows, rhs = [], []
    for k, idx in enumerate(pr.at):
        for r in range(cluster.n_resources):
            row = np.zeros(pr.P)
            row[idx] = pr.d[idx, r]
            if np.any(row):
                rows.append(row)
                rhs.append(cluster.capacity[k, r])
    users = np.unique(pr.n)
    eq = (pr.n[None, :] == users[:, None]).astype(float)
    f = pr.residuals(state.xp, state.lam)
    res = lp_solve(LinearProgram(f, np.array(rows), np.array(rhs), eq, pr.totals(state.xp)[users]))
    if not res.ok:
        raise UtilityDomainError(f"placement LP failed: {res.status}")
    x = _shrink_into(cluster, pr.dense(np.maximum(res.x, 0.0)))
    return x, reconstruct_multipliers(cluster, pr.params, x, SATURATION_TOL)


def _barrier_start(cluster: ClusterSpec, params: UtilityParams, eps: float, saturation_tol: float):
    """Point of the distributed barrier heuristic, shrunk per server into the
    capacities, with least-squares multipliers."""
    from .distributed import DistributedConfig, solve_distributed

    res = solve_distributed(cluster, params, DistributedConfig(barrier_epsilon=eps, max_rounds=2000))
    x = _shrink_into(cluster, np.maximum(res.allocation.tasks, 0.0))
    if np.any(x.sum(axis=1)[cluster.gamma.sum(axis=1) > 0] <= 0):
        raise UtilityDomainError("barrier point leaves a user without tasks")
    return x, reconstruct_multipliers(cluster, params, x, saturation_tol)


def solve_psmfa(
    cluster: ClusterSpec,
    params: UtilityParams,
    config: SolverConfig | None = None,
    start: tuple[np.ndarray, np.ndarray] | None = None,
) -> SolveResult:
    """Drive the merit to zero from a feasible start (see SolverConfig for the
    direction and staging options).  The returned merit_history belongs to the
    last stage; earlier stages are listed in diagnostics["stages"]."""
    config = config or SolverConfig()
    t0 = time.perf_counter()
    stages = _ladder(params, config.continuation_above) if config.continuation else [params]
    fallbacks = []
    if start is None:
        base = uniform_allocation(cluster).tasks
        lam0 = np.zeros((cluster.n_servers, cluster.n_resources))
        if config.restart_barrier is not None:
            fallbacks.append(lambda: _barrier_start(cluster, params, config.restart_barrier, config.saturation_tol))
        fallbacks += [lambda f=f: (f * base, lam0) for f in config.restart_fractions]
    all_audits: list[IterateAudit] = []
    total_iters = 0
    make = lambda: start if start is not None else initialize(cluster, config)
    attempt = chain = 0
    stage = None
    while make is not None:
        try:
            x, lam = make()
        except (UtilityDomainError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.info("start %d unavailable: %s", attempt, exc)
            x = None
        if x is not None:
            records = []
            histories: list[list[float]] = []
            for k, sp in enumerate(stages):
                pr = _Pairs(cluster, sp, config.normalize)
                if k > 0:
                    lam = reconstruct_multipliers(cluster, sp, x, config.saturation_tol)
                stage = _iterate(cluster, pr, x, lam, config, t0)
                x, lam = pr.dense(stage.state.xp), stage.state.lam
                total_iters += stage.iterations
                histories.append(stage.history)
                all_audits.extend(stage.audits)
                records.append(
                    {
                        "alpha": [p.alpha for p in sp.per_server],
                        "status": stage.status,
                        "iterations": stage.iterations,
                        "merit": stage.history[-1],
                        "stall_reason": stage.stall_reason,
                    }
                )
            if stage.status != STALLED:
                break
            logger.info("start %d stalled (%s), restarting", attempt, stage.stall_reason)
        attempt += 1
        if x is not None and chain < config.restart_reassign:
            chain += 1
            make = lambda pr=pr, st=stage.state: _reassign(cluster, pr, st)
        else:
            chain = 0
            make = fallbacks.pop(0) if fallbacks else None
    if stage is None:
        raise UtilityDomainError("no usable starting point")
    pr = _Pairs(cluster, params, config.normalize)
    diag = _diagnostics(cluster, pr, stage.state)
    diag["stall_reason"] = stage.stall_reason
    diag["stages"] = records
    diag["merit_kind"] = "normalized" if config.normalize else "raw"
    diag["restarts"] = attempt
    result = SolveResult(
        Allocation(pr.dense(stage.state.xp)),
        stage.state.lam.copy(),
        stage.history,
        total_iters,
        stage.status,
        diag,
        all_audits,
        time.perf_counter() - t0,
        histories,
    )
    logger.info("psmfa %s after %d iterations, merit %.3g", stage.status, total_iters, stage.history[-1])
    return result
