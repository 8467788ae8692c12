"""Validators for sharing incentive, envy-freeness, bottleneck fairness,
Pareto optimality and the per-server alpha-PF-VDS inequality, plus the
deviation metric.

Every check accepts any Allocation, whatever mechanism produced it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import TIME_SHARED, Allocation, ClusterSpec, task_utility
from .numerics import LinearProgram, lp_solve
from .utility import UtilityParams, g_prime

PROPERTIES = ("si", "ef", "bf", "po", "vi")


@dataclass
class PropertyReport:
    name: str
    verdict: bool | None  # None when the property does not apply
    tol: float
    witness: dict | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict is False and self.witness is None:
            raise ValueError("a failing report needs a witness")

    @property
    def passed(self) -> bool:
        return self.verdict is True

    def to_dict(self) -> dict:
        return {
            "property": self.name,
            "verdict": {True: "pass", False: "fail", None: "inapplicable"}[self.verdict],
            "tol": self.tol,
            "witness": self.witness,
            "details": self.details,
        }


def _tasks(alloc) -> tuple[np.ndarray, str]:
    if isinstance(alloc, Allocation):
        return np.asarray(alloc.tasks, dtype=float), alloc.mode
    return np.asarray(alloc, dtype=float), "divisible"


def _server_rows(cluster: ClusterSpec, i: int, users: np.ndarray, mode: str):
    """Constraint rows (resources x users) and right sides of server i."""
    if mode == TIME_SHARED:
        return (1.0 / cluster.gamma[users, i])[None, :], np.ones(1)
    keep = cluster.capacity[i] > 0
    return cluster.demand[users][:, keep].T, cluster.capacity[i, keep]


# ---------------------------------------------------------------------------


def check_sharing_incentive(cluster: ClusterSpec, alloc, tol: float = 1e-6) -> PropertyReport:
    """x_n >= phi_n / sum(phi) * sum_i gamma_{n,i} for every user."""
    x, _ = _tasks(alloc)
    bound = cluster.weights / cluster.weights.sum() * cluster.gamma.sum(axis=1)
    margin = x.sum(axis=1) - bound
    worst = int(np.argmin(margin))
    ok = bool(margin[worst] >= -tol * max(1.0, bound[worst]))
    witness = None
    if not ok:
        witness = {"user": cluster.user_ids[worst], "tasks": float(x[worst].sum()), "bound": float(bound[worst])}
    return PropertyReport("sharing_incentive", ok, tol, witness, {"min_margin": float(margin[worst])})


EF_SCOPES = ("accessible", "aggregate")


def check_envy_freeness(cluster: ClusterSpec, alloc, tol: float = 1e-6, scope: str = "accessible") -> PropertyReport:
    """U_n(a_n) >= U_n(phi_n / phi_m * b) for all ordered pairs, a_n = x_n d_n.

    With scope "aggregate", b = x_m d_m is m's whole bundle.  With placement
    constraints a user cannot use tasks placed on servers it is not eligible
    for, and the aggregate comparison then fails for any allocation that
    respects eligibility (two users pinned to different servers of unequal
    size).  The default scope "accessible" counts only m's tasks on servers
    where n can run, b = sum_{i: gamma_{n,i} > 0} x_{m,i} d_m.
    """
    if scope not in EF_SCOPES:
        raise ValueError(f"scope must be one of {EF_SCOPES}")
    x, _ = _tasks(alloc)
    totals = x.sum(axis=1)
    phi = cluster.weights
    usable = cluster.gamma > 0
    worst, witness = math.inf, None
    for n in range(cluster.n_users):
        own = task_utility(totals[n] * cluster.demand[n], cluster.demand[n])
        for m in range(cluster.n_users):
            if m == n:
                continue
            seen = totals[m] if scope == "aggregate" else x[m, usable[n]].sum()
            other = task_utility(phi[n] / phi[m] * seen * cluster.demand[m], cluster.demand[n])
            margin = own - other
            if margin < worst:
                worst = margin
                witness = {
                    "user": cluster.user_ids[n],
                    "envies": cluster.user_ids[m],
                    "own_tasks": own,
                    "tasks_with_other_bundle": other,
                }
    details = {"scope": scope}
    if witness is None:
        return PropertyReport("envy_freeness", True, tol, None, {**details, "min_margin": None})
    scale = max(1.0, witness["tasks_with_other_bundle"])
    ok = bool(worst >= -tol * scale)
    return PropertyReport("envy_freeness", ok, tol, None if ok else witness, {**details, "min_margin": float(worst)})


@dataclass(frozen=True)
class Bottlenecks:
    per_server: tuple[int | None, ...]  # resource index or None
    overall: int | None


def find_bottleneck(cluster: ClusterSpec, tol: float = 1e-12) -> Bottlenecks:
    """rho is a bottleneck at server i iff d_{n,rho}/c_{i,rho} >= d_{n,r}/c_{i,r}
    for every resource r and every eligible user n; overall iff at every server."""
    sets = [_all_bottlenecks(cluster, i, tol) for i in range(cluster.n_servers)]
    per = [min(b) if b else None for b in sets]
    common = set.intersection(*sets) if sets else set()
    overall = min(common) if common else None
    return Bottlenecks(tuple(per), overall)


def _all_bottlenecks(cluster: ClusterSpec, i: int, tol: float) -> set[int]:
    users = cluster.eligible_users(i)
    if users.size == 0:
        return set()
    cap = cluster.capacity[i]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cap > 0, cluster.demand[users] / cap, 0.0)
    top = ratio.max(axis=1)
    return {r for r in range(cluster.n_resources) if cap[r] > 0 and np.all(ratio[:, r] >= top * (1 - tol))}


def _server_max_min_gain(cluster, x, i, mode, share, tie):
    """Largest gain of each eligible user at server i when users with a
    weakly smaller share (up to relative tie) keep their tasks and the rest
    may be emptied."""
    users = cluster.eligible_users(i)
    A, b = _server_rows(cluster, i, users, mode)
    gains = np.zeros(users.size)
    for a in range(users.size):
        keep = share <= share[a] * (1 + tie)
        lower = np.where(keep, x[users, i], 0.0)
        c = np.zeros(users.size)
        c[a] = 1.0
        if np.any(A @ lower > b * (1 + 1e-9) + 1e-12):
            gains[a] = math.nan  # already over capacity
            continue
        res = lp_solve(LinearProgram(c, A, b, lower=lower, maximize=True))
        gains[a] = res.value - x[users[a], i] if res.ok else math.nan
    return users, gains


def check_bottleneck_fairness(cluster: ClusterSpec, alloc, tol: float = 1e-6, scope: str = "per-server") -> PropertyReport:
    """Weighted max-min on the bottleneck resource at each server that has one.

    A user's bottleneck share at server i is x_n d_{n,rho}/(phi_n c_{i,rho});
    the allocation passes when no user can gain tasks at a server using idle
    capacity or capacity of users with a strictly larger share there.
    scope="overall" requires a system-wide bottleneck."""
    if scope not in ("per-server", "overall"):
        raise ValueError("scope must be 'per-server' or 'overall'")
    x, mode = _tasks(alloc)
    bn = find_bottleneck(cluster)
    if scope == "overall":
        if bn.overall is None:
            return PropertyReport("bottleneck_fairness", None, tol, details={"reason": "no overall bottleneck"})
        servers = {i: bn.overall for i in range(cluster.n_servers)}
    else:
        servers = {i: r for i, r in enumerate(bn.per_server) if r is not None}
        if not servers:
            return PropertyReport("bottleneck_fairness", None, tol, details={"reason": "no server has a bottleneck"})
    totals = x.sum(axis=1)
    worst, witness = 0.0, None
    checked = []
    for i, rho in servers.items():
        users = cluster.eligible_users(i)
        if users.size == 0:
            continue
        share = totals[users] * cluster.demand[users, rho] / (cluster.weights[users] * cluster.capacity[i, rho])
        users, gains = _server_max_min_gain(cluster, x, i, mode, share, tol)
        checked.append(cluster.server_ids[i])
        for a, n in enumerate(users):
            g = gains[a]
            rel = math.inf if math.isnan(g) else g / max(1.0, x[n, i])
            if rel > tol and rel > worst:
                worst = rel
                witness = {
                    "server": cluster.server_ids[i],
                    "resource": cluster.resources[rho],
                    "user": cluster.user_ids[n],
                    "gain": None if math.isnan(g) else float(g),
                    "shares": {cluster.user_ids[m]: float(s) for m, s in zip(users, share)},
                }
    return PropertyReport("bottleneck_fairness", witness is None, tol, witness, {"servers": checked})


def check_pareto(cluster: ClusterSpec, alloc, tol: float = 1e-6) -> PropertyReport:
    """max sum(delta) over re-placements y >= 0 with sum_i y_{n,i} = x_n + delta_n."""
    x, mode = _tasks(alloc)
    n, i = cluster.pairs()
    P, N = n.size, cluster.n_users
    width = P + N
    rows, rhs = [], []
    for k in range(cluster.n_servers):
        mask = i == k
        users = n[mask]
        if users.size == 0:
            continue
        A, b = _server_rows(cluster, k, users, mode)
        for row, cap in zip(A, b):
            full = np.zeros(width)
            full[np.flatnonzero(mask)] = row
            rows.append(full)
            rhs.append(cap)
    eq, eq_rhs = [], []
    totals = x.sum(axis=1)
    for u in range(N):
        row = np.zeros(width)
        row[:P][n == u] = 1.0
        row[P + u] = -1.0
        eq.append(row)
        eq_rhs.append(totals[u])
    c = np.concatenate([np.zeros(P), np.ones(N)])
    # users without any eligible server cannot grow
    for u in range(N):
        if not np.any(n == u):
            eq[u][P + u] = 0.0
            if totals[u] != 0:
                eq_rhs[u] = 0.0
    res = lp_solve(LinearProgram(c, np.array(rows).reshape(-1, width), np.array(rhs), np.array(eq), np.array(eq_rhs), maximize=True))
    if not res.ok:
        return PropertyReport("pareto", False, tol, {"reason": f"allocation infeasible ({res.status})"})
    delta = res.x[P:]
    gain = float(res.value)
    ok = gain <= tol * max(1.0, float(totals.sum()))
    witness = None
    if not ok:
        u = int(np.argmax(delta))
        witness = {"user": cluster.user_ids[u], "extra_tasks": float(delta[u]), "total_gain": gain}
    return PropertyReport("pareto", ok, tol, witness, {"total_gain": gain})


def check_alpha_pf_vds(cluster: ClusterSpec, params: UtilityParams, alloc, tol: float = 1e-6) -> PropertyReport:
    """Per server, sum_n (y_{n,i} - x_{n,i}) g'(s_{n,i}) / gamma_{n,i} <= 0 for all
    feasible y_i, with s the weighted VDS.  The left side is linear in y_i, so
    its maximum over server i's polytope is found by LP and compared (relative
    to the value at x_i) against tol.  For g'(z) = z^-alpha this is the
    alpha-PF-VDS inequality."""
    x, mode = _tasks(alloc)
    totals = x.sum(axis=1)
    worst, witness = 0.0, None
    per_server = {}
    for i in range(cluster.n_servers):
        users = cluster.eligible_users(i)
        if users.size == 0:
            continue
        if np.any(totals[users] <= 0):
            bad = cluster.user_ids[users[np.argmin(totals[users])]]
            return PropertyReport("alpha_pf_vds", None, tol, details={"reason": f"user {bad} has no tasks"})
        p = params[i]
        s = totals[users] / (cluster.weights[users] * cluster.gamma[users, i])
        # log-scale coefficients so huge alpha does not overflow
        with np.errstate(over="ignore", divide="ignore"):
            logc = np.log(g_prime(p.alpha, p.a_coef, p.b_coef, s)) - np.log(cluster.gamma[users, i])
        coef = np.exp(logc - logc.max())
        A, b = _server_rows(cluster, i, users, mode)
        res = lp_solve(LinearProgram(coef, A, b, maximize=True))
        if not res.ok:
            return PropertyReport("alpha_pf_vds", None, tol, details={"reason": f"LP {res.status} at {cluster.server_ids[i]}"})
        cur = float(coef @ x[users, i])
        excess = (res.value - cur) / max(cur, 1e-300)
        per_server[cluster.server_ids[i]] = excess
        if excess > tol and excess > worst:
            worst = excess
            witness = {
                "server": cluster.server_ids[i],
                "relative_excess": excess,
                "better_point": {cluster.user_ids[m]: float(v) for m, v in zip(users, res.x)},
            }
    return PropertyReport("alpha_pf_vds", witness is None, tol, witness, {"relative_excess": per_server})


# ---------------------------------------------------------------------------
# deviation


def deviation(cluster: ClusterSpec, alloc, n: int | None = None):
    """D_n = sum_i (x_{n,i}/x_n) (s_{n,i} - min_m s_{m,i}) / min_m s_{m,i},
    with weighted VDS s and min over active (x_m > 0) eligible users of i.

    With n given returns D_n (NaN if x_n = 0); otherwise the array of all
    D_n with NaN for idle users."""
    x, _ = _tasks(alloc)
    totals = x.sum(axis=1)
    D = np.full(cluster.n_users, np.nan)
    active = totals > 0
    D[active] = 0.0
    for i in range(cluster.n_servers):
        users = cluster.eligible_users(i)
        users = users[active[users]]
        if users.size == 0:
            continue
        s = totals[users] / (cluster.weights[users] * cluster.gamma[users, i])
        low = s.min()
        if not low > 0:
            continue
        D[users] += x[users, i] / totals[users] * (s - low) / low
    if n is not None:
        return float(D[n])
    return D


def deviation_summary(cluster: ClusterSpec, alloc) -> dict:
    """phi-weighted average and maximum of D_n over active users."""
    D = deviation(cluster, alloc)
    ok = ~np.isnan(D)
    if not ok.any():
        return {"average": math.nan, "max": math.nan}
    phi = cluster.weights[ok]
    return {"average": float(np.sum(phi * D[ok]) / phi.sum()), "max": float(D[ok].max())}


def validate(cluster: ClusterSpec, alloc, properties=PROPERTIES, params: UtilityParams | None = None, tol: float = 1e-6):
    out = []
    for prop in properties:
        if prop == "si":
            out.append(check_sharing_incentive(cluster, alloc, tol))
        elif prop == "ef":
            out.append(check_envy_freeness(cluster, alloc, tol))
        elif prop == "bf":
            out.append(check_bottleneck_fairness(cluster, alloc, tol))
        elif prop == "po":
            out.append(check_pareto(cluster, alloc, tol))
        elif prop == "vi":
            if params is None:
                params = UtilityParams.alpha_fair(cluster, 1.0)
            out.append(check_alpha_pf_vds(cluster, params, alloc, tol))
        else:
            raise ValueError(f"unknown property {prop!r}; expected a subset of {PROPERTIES}")
    return out
