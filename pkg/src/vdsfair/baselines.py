"""Reference mechanisms: PS-DSF (divisible and time-shared), DRFH and TSF.

PS-DSF is computed as the fixed point of per-server best responses, each
of which is an exact event-driven water-filling on the weighted VDS with
the user's tasks at other servers as an offset.  DRFH and TSF are
lexicographic max-min allocations found by iterated linear programs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import DIVISIBLE, MODES, TIME_SHARED, Allocation, ClusterSpec, uniform_allocation
from .numerics import LinearProgram, lp_solve

logger = logging.getLogger(__name__)

MECHANISMS = ("psdsf", "drfh", "tsf", "uniform")


class BaselineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PS-DSF


def water_fill(demand, capacity, rate, offset, detail: bool = False):
    """Weighted max-min at a single server with offsets.

    User n sits at level L_n = (offset_n + y_n) / rate_n.  The common level
    rises; every unblocked user at or below it grows at rate_n per unit of
    level; when a resource saturates, every user demanding it is blocked.

    demand: (U, M) per-task demand, capacity: (M,), rate, offset: (U,).
    Returns the added tasks y (U,); with detail=True also the index of the
    saturation event that blocked each user and the events themselves as
    (level, saturated resource indices) pairs.
    """
    demand = np.asarray(demand, dtype=float)
    cap = np.asarray(capacity, dtype=float)
    rate = np.asarray(rate, dtype=float)
    offset = np.asarray(offset, dtype=float)
    U = rate.size
    y = np.zeros(U)
    blocked_at = np.full(U, -1)
    events: list[tuple[float, np.ndarray]] = []
    if U == 0:
        return (y, blocked_at, events) if detail else y
    start = offset / rate
    blocked = np.zeros(U, dtype=bool)
    saturated = np.zeros(cap.size, dtype=bool)
    used = np.zeros(cap.size)
    level = float(start.min())
    tol = 1e-12
    while not blocked.all():
        grow = (~blocked) & (start <= level + tol * max(1.0, abs(level)))
        speed = (rate[grow, None] * demand[grow]).sum(axis=0)
        nxt = np.inf
        hit = None
        live = (speed > 0) & ~saturated
        if live.any():
            steps = np.maximum(cap[live] - used[live], 0.0) / speed[live]
            k = int(np.argmin(steps))
            nxt = level + float(steps[k])
            hit = np.flatnonzero(live)[k]
        waiting = (~blocked) & ~grow
        joins = start[waiting]
        if joins.size and joins.min() < nxt:
            nxt, hit = float(joins.min()), None
        if not np.isfinite(nxt):
            raise BaselineError("water-filling is unbounded: a user demands nothing with finite capacity")
        y[grow] = rate[grow] * nxt - offset[grow]
        y = np.maximum(y, 0.0)
        used = y @ demand
        level = nxt
        if hit is not None:
            # every resource reaching capacity at this level saturates together
            full = (cap - used <= tol * np.maximum(1.0, cap)) & (speed > 0) & ~saturated
            full[hit] = True
            used[full] = cap[full]
            saturated |= full
            newly = (demand[:, full] > 0).any(axis=1) & ~blocked
            blocked_at[newly] = len(events)
            events.append((level, np.flatnonzero(full)))
            blocked |= newly
    return (y, blocked_at, events) if detail else y


def _server_problem(cluster: ClusterSpec, x: np.ndarray, i: int, mode: str):
    users = cluster.eligible_users(i)
    offset = x[users].sum(axis=1) - x[users, i]
    rate = cluster.weights[users] * cluster.gamma[users, i]
    if mode == TIME_SHARED:
        demand = (1.0 / cluster.gamma[users, i])[:, None]
        cap = np.ones(1)
    else:
        demand = cluster.demand[users]
        cap = cluster.capacity[i]
    return users, demand, cap, rate, offset


def _server_best_response(cluster: ClusterSpec, x: np.ndarray, i: int, mode: str):
    users, demand, cap, rate, offset = _server_problem(cluster, x, i, mode)
    if users.size == 0:
        return users, np.zeros(0)
    return users, water_fill(demand, cap, rate, offset)


def _sweep(cluster: ClusterSpec, x: np.ndarray, mode: str) -> float:
    change = 0.0
    for i in range(cluster.n_servers):
        users, y = _server_best_response(cluster, x, i, mode)
        if users.size:
            change = max(change, float(np.max(np.abs(y - x[users, i]), initial=0.0)))
            x[users, i] = y
    return change


def _extrapolate(x: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Follow a constant per-sweep drift until some coordinate reaches zero."""
    down = step < 0
    if not down.any():
        return x
    t = float(np.min(x[down] / -step[down]))
    return np.maximum(x + t * step, 0.0)


def solve_psdsf(
    cluster: ClusterSpec,
    mode: str = DIVISIBLE,
    tol: float = 1e-13,
    max_sweeps: int = 10_000,
) -> Allocation:
    """Per-server weighted max-min on VDS, iterated to a joint fixed point.

    Servers are visited in ascending index, so at equal VDS a user's tasks
    land on the lower-index server first.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.zeros((cluster.n_users, cluster.n_servers))
    change = math.inf
    prev_step = None
    for sweep in range(max_sweeps):
        before = x.copy()
        change = _sweep(cluster, x, mode)
        scale = max(1.0, float(x.max(initial=0.0)))
        if change <= tol * scale:
            logger.debug("psdsf fixed point after %d sweeps", sweep + 1)
            return Allocation(x, mode)
        step = x - before
        # on servers with identical eligible users the sweeps can slide tasks
        # between them at a constant rate; jump to the end of the slide
        if prev_step is not None and np.abs(step - prev_step).max() <= 1e-6 * change:
            x = _extrapolate(x, step)
            prev_step = None
        else:
            prev_step = step
    raise BaselineError(f"PS-DSF best responses did not settle in {max_sweeps} sweeps (last change {change:.3g})")


def audit_psdsf(cluster: ClusterSpec, alloc: Allocation, tol: float = 1e-7) -> list[dict]:
    """Per-server check that no user can gain tasks using residual capacity or
    capacity taken from users with strictly larger weighted VDS there.

    Returns the violations (empty when the allocation passes)."""
    x = np.asarray(alloc.tasks, dtype=float)
    totals = x.sum(axis=1)
    out = []
    for i in range(cluster.n_servers):
        users = cluster.eligible_users(i)
        if users.size == 0:
            continue
        s = totals[users] / (cluster.weights[users] * cluster.gamma[users, i])
        if alloc.mode == TIME_SHARED:
            demand = (1.0 / cluster.gamma[users, i])[:, None]
            cap = np.ones(1)
        else:
            demand, cap = cluster.demand[users], cluster.capacity[i]
        for a, n in enumerate(users):
            # y_m >= x_m for users not above n; others may shrink to zero
            keep = s <= s[a] * (1 + tol)
            lower = np.where(keep, x[users, i], 0.0)
            c = np.zeros(users.size)
            c[a] = 1.0
            res = lp_solve(LinearProgram(c, demand.T, cap, lower=lower, maximize=True))
            if not res.ok:
                # lower bounds infeasible: allocation was already over capacity
                out.append({"server": cluster.server_ids[i], "user": cluster.user_ids[n], "gain": float("nan")})
                continue
            gain = res.value - x[n, i]
            if gain > tol * max(1.0, x[n, i]):
                out.append({"server": cluster.server_ids[i], "user": cluster.user_ids[n], "gain": float(gain)})
    return out


# ---------------------------------------------------------------------------
# DRFH / TSF


@dataclass(frozen=True)
class GlobalShares:
    shares: np.ndarray  # s_n, global dominant share
    gamma: np.ndarray  # gamma_n = sum_i gamma_{n,i}
    dominant: np.ndarray  # index of the globally dominant resource


def _dominant_ratio(cluster: ClusterSpec):
    """(max_r d_{n,r}/C_r, argmax) with C the capacity summed over servers."""
    total_cap = cluster.capacity.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cluster.demand > 0, cluster.demand / total_cap, 0.0)
    return ratio.max(axis=1), ratio.argmax(axis=1)


def global_shares(cluster: ClusterSpec, alloc: Allocation | np.ndarray | None = None) -> GlobalShares:
    per_task, dom = _dominant_ratio(cluster)
    if alloc is None:
        x = np.zeros(cluster.n_users)
    else:
        x = np.asarray(alloc.tasks if isinstance(alloc, Allocation) else alloc).sum(axis=1)
    return GlobalShares(x * per_task, cluster.gamma.sum(axis=1), dom)


def _capacity_rows(cluster: ClusterSpec, n, i, width):
    rows, rhs = [], []
    for k in range(cluster.n_servers):
        for r in range(cluster.n_resources):
            row = np.zeros(width)
            mask = i == k
            row[: n.size][mask] = cluster.demand[n[mask], r]
            if np.any(row):
                rows.append(row)
                rhs.append(cluster.capacity[k, r])
    return rows, rhs


def lexicographic_max_min(cluster: ClusterSpec, share_per_task: np.ndarray, rel_tol: float = 1e-9) -> Allocation:
    """Lexicographic max-min of share_per_task[n] * x_n over the feasible set.

    Each round maximizes the common level t of the unfrozen users, then
    freezes the users whose share cannot exceed t; finally a placement LP
    realizes the frozen totals, preferring lower-index servers."""
    n, i = cluster.pairs()
    P = n.size
    N = cluster.n_users
    w = np.asarray(share_per_task, dtype=float)
    has_pair = np.bincount(n, minlength=N) > 0
    cap_rows, cap_rhs = _capacity_rows(cluster, n, i, P + 1)

    def user_row(u, coef):
        row = np.zeros(P + 1)
        row[: P][n == u] = coef
        return row

    level = np.full(N, np.nan)
    level[~has_pair] = 0.0
    while np.isnan(level).any():
        open_ = np.flatnonzero(np.isnan(level))
        rows, rhs = list(cap_rows), list(cap_rhs)
        for u in range(N):
            if u in open_:
                row = -user_row(u, w[u])
                row[P] = 1.0
                rows.append(row)
                rhs.append(0.0)
            elif has_pair[u]:
                rows.append(-user_row(u, w[u]))
                rhs.append(-level[u])
        c = np.zeros(P + 1)
        c[P] = 1.0
        res = lp_solve(LinearProgram(c, np.array(rows), np.array(rhs), maximize=True))
        if not res.ok:
            raise BaselineError(f"max-min level LP failed: {res.status}")
        t = res.value
        best = np.empty(open_.size)
        for j, u in enumerate(open_):
            rows2, rhs2 = list(cap_rows), list(cap_rhs)
            for v in range(N):
                if v == u or not has_pair[v]:
                    continue
                rows2.append(-user_row(v, w[v]))
                rhs2.append(-(t if v in open_ else level[v]))
            res2 = lp_solve(LinearProgram(user_row(u, w[u]), np.array(rows2), np.array(rhs2), maximize=True))
            best[j] = res2.value if res2.ok else t
        stuck = best <= t + rel_tol * max(1.0, abs(t))
        if not stuck.any():
            stuck = best <= best.min()
        level[open_[stuck]] = t
        logger.debug("max-min level %.12g fixes %s", t, [cluster.user_ids[u] for u in open_[stuck]])

    # placement: totals fixed, cheapest in server index
    target = np.where(w > 0, level / np.where(w > 0, w, 1.0), 0.0)
    cost = np.append(i + 1.0, 0.0)
    eq = [user_row(u, 1.0) for u in range(N) if has_pair[u]]
    rhs = [target[u] for u in range(N) if has_pair[u]]
    res = lp_solve(LinearProgram(cost, np.array(cap_rows), np.array(cap_rhs), np.array(eq), np.array(rhs)))
    if not res.ok:
        # roundoff can make the exact totals marginally infeasible; relax slightly
        rows = list(cap_rows) + [-r for r in eq]
        rhs2 = list(cap_rhs) + [-(1 - 1e-10) * v for v in rhs]
        res = lp_solve(LinearProgram(cost, np.array(rows), np.array(rhs2)))
        if not res.ok:
            raise BaselineError(f"placement LP failed: {res.status}")
    x = np.zeros((N, cluster.n_servers))
    x[n, i] = res.x[:P]
    return Allocation(x)


def solve_drfh(cluster: ClusterSpec) -> Allocation:
    """Max-min on global dominant shares over weights."""
    per_task, _ = _dominant_ratio(cluster)
    return lexicographic_max_min(cluster, per_task / cluster.weights)


def solve_tsf(cluster: ClusterSpec) -> Allocation:
    """Max-min on x_n / gamma_n (weighted); gamma_n sums only servers where the user fits."""
    g = cluster.gamma.sum(axis=1)
    with np.errstate(divide="ignore"):
        per_task = np.where(g > 0, 1.0 / (g * cluster.weights), 0.0)
    return lexicographic_max_min(cluster, per_task)


def run_baseline(cluster: ClusterSpec, mechanism: str, mode: str = DIVISIBLE) -> Allocation:
    if mechanism == "psdsf":
        return solve_psdsf(cluster, mode)
    if mechanism == "drfh":
        return solve_drfh(cluster)
    if mechanism == "tsf":
        return solve_tsf(cluster)
    if mechanism == "uniform":
        return uniform_allocation(cluster, mode)
    raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")
