"""Barrier-based distributed heuristic.

Each server i keeps only its own capacities, the demands of its eligible
users, its slice x[:, i] and the shared per-user totals x_n.  Multipliers
are replaced by the quadratic-barrier estimate

    lambda_{i,r}(x) = [sum_m x_{m,i} d_{m,r} - c_{i,r} + eps]^+ / eps^2

and each server moves x_{n,i} against its stationarity residual f_{n,i}.
All cluster reads go through :class:`ClusterAccess` so tests can audit
locality.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import Allocation, ClusterSpec, IneligiblePairError, uniform_allocation
from .psmfa import CONVERGED, MAX_ITERS, STALLED, SolveResult
from .utility import ServerUtility, UtilityDomainError, UtilityParams, g_double_prime, g_prime

logger = logging.getLogger(__name__)

SYNC = "sync"
RANDOM = "random"
PARALLEL = "parallel"
SCHEDULES = (SYNC, RANDOM, PARALLEL)


class ClusterAccess:
    """The only door through which a server reads cluster data."""

    def __init__(self, cluster: ClusterSpec):
        self._c = cluster

    def eligible_users(self, i: int) -> np.ndarray:
        return self._c.eligible_users(i)

    def capacity(self, i: int) -> np.ndarray:
        return self._c.capacity[i]

    def demand(self, n: int) -> np.ndarray:
        return self._c.demand[n]

    def gamma(self, n: int, i: int) -> float:
        return float(self._c.gamma[n, i])

    def weight(self, n: int) -> float:
        return float(self._c.weights[n])


@dataclass(frozen=True)
class ServerView:
    index: int
    users: np.ndarray  # global indices of N_i
    capacity: np.ndarray  # (M,)
    demand: np.ndarray  # (|N_i|, M)
    gamma: np.ndarray  # (|N_i|,)
    weights: np.ndarray  # (|N_i|,)

    @classmethod
    def build(cls, access: ClusterAccess, i: int) -> "ServerView":
        users = np.asarray(access.eligible_users(i))
        M = np.asarray(access.capacity(i)).size
        return cls(
            i,
            users,
            np.array(access.capacity(i), dtype=float),
            np.array([access.demand(n) for n in users], dtype=float).reshape(-1, M),
            np.array([access.gamma(n, i) for n in users]),
            np.array([access.weight(n) for n in users]),
        )


@dataclass
class DistributedConfig:
    barrier_epsilon: float = 1e-2
    # per-server step sizes; None means the default for the chosen rule
    kappa: tuple[float, ...] | None = None
    # "gradient": x += kappa * v with v = [-f]^+ as written
    # "newton": v solves the local barrier Newton system over the free users
    rule: str = "newton"
    tol: float = 1e-9
    max_rounds: int = 200_000
    schedule: str = SYNC
    seed: int = 0
    time_limit: float | None = None

    def __post_init__(self):
        if not self.barrier_epsilon > 0:
            raise ValueError("barrier_epsilon must be positive")
        if self.kappa is not None and any(not k > 0 for k in self.kappa):
            raise ValueError("every kappa_i must be positive")
        if self.rule not in ("gradient", "newton"):
            raise ValueError("rule must be 'gradient' or 'newton'")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.tol > 0 or self.max_rounds < 1:
            raise ValueError("tol must be positive and max_rounds >= 1")


def barrier_multipliers(cluster: ClusterSpec, x, i: int, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ValueError("barrier epsilon must be positive")
    x = np.asarray(x, dtype=float)
    used = x[:, i] @ cluster.demand
    return _barrier(used, cluster.capacity[i], eps)


def _barrier(used, cap, eps):
    return np.maximum(used - cap + eps, 0.0) / eps**2


def _residuals(view: ServerView, util: ServerUtility, x_local, totals_local, eps):
    """(f, df/dx_{n,i} diagonal curvature, lambda) at one server."""
    if np.any(totals_local <= 0):
        raise UtilityDomainError("barrier residual needs positive totals")
    lam = _barrier(x_local @ view.demand, view.capacity, eps)
    z = totals_local / (view.weights * view.gamma)
    f = view.demand @ lam - g_prime(util.alpha, util.a_coef, util.b_coef, z) / view.gamma
    curv = -g_double_prime(util.alpha, util.a_coef, util.b_coef, z) / (view.weights * view.gamma**2)
    return f, curv, lam


def local_direction(cluster: ClusterSpec, params: UtilityParams, x, n: int, i: int, eps: float) -> float:
    """v = -f_{n,i}(x, lambda(x)), clamped at zero when x_{n,i} = 0."""
    if not cluster.eligible[n, i]:
        raise IneligiblePairError(f"user {cluster.users[n].id} is not eligible at {cluster.servers[i].id}")
    x = np.asarray(x, dtype=float)
    total = x[n].sum()
    if not total > 0:
        raise UtilityDomainError(f"user {cluster.users[n].id} has no tasks")
    p = params[i]
    lam = barrier_multipliers(cluster, x, i, eps)
    z = total / (cluster.weights[n] * cluster.gamma[n, i])
    v = -(cluster.demand[n] @ lam - g_prime(p.alpha, p.a_coef, p.b_coef, z) / cluster.gamma[n, i])
    return float(max(v, 0.0)) if x[n, i] <= 0 else float(v)


def server_update(view: ServerView, util: ServerUtility, x_local, totals_local, eps, kappa, rule) -> np.ndarray:
    """New x[:, i] for one server from local data and the shared totals."""
    f, curv, _ = _residuals(view, util, x_local, totals_local, eps)
    v = -f
    if rule == "newton":
        free = (x_local > 0) | (v > 0)
        active = (x_local @ view.demand - view.capacity + eps) > 0
        D = view.demand[np.ix_(free, active)]
        H = np.diag(curv[free]) + D @ D.T / eps**2
        v = np.zeros_like(x_local)
        v[free] = np.linalg.solve(H, -f[free])
    v = np.where(x_local > 0, v, np.maximum(v, 0.0))
    return np.maximum(x_local + kappa * v, 0.0)


def complementarity_residual(cluster: ClusterSpec, params: UtilityParams, x, eps: float) -> float:
    """max over eligible pairs of |min(x_{n,i}, f_{n,i}(x, lambda(x)))|."""
    x = np.asarray(x, dtype=float)
    totals = x.sum(axis=1)
    access = ClusterAccess(cluster)
    worst = 0.0
    for i in range(cluster.n_servers):
        view = ServerView.build(access, i)
        if view.users.size == 0:
            continue
        f, _, _ = _residuals(view, params[i], x[view.users, i], totals[view.users], eps)
        worst = max(worst, float(np.max(np.abs(np.minimum(x[view.users, i], f)))))
    return worst


def default_kappa(cluster: ClusterSpec, rule: str) -> tuple[float, ...]:
    if rule == "newton":
        return (1.0,) * cluster.n_servers
    out = []
    for i in range(cluster.n_servers):
        g = cluster.gamma[cluster.eligible[:, i], i]
        out.append(1e-2 * float(g.mean()) if g.size else 1.0)
    return tuple(out)


@dataclass
class DistributedResult(SolveResult):
    residual_history: list[float] = field(default_factory=list)
    rounds: int = 0

    def residual_csv(self) -> str:
        lines = ["round,residual"]
        lines += [f"{k},{r:.12g}" for k, r in enumerate(self.residual_history)]
        return "\n".join(lines) + "\n"


def solve_distributed(
    cluster: ClusterSpec,
    params: UtilityParams,
    config: DistributedConfig | None = None,
    start=None,
    access: ClusterAccess | None = None,
) -> DistributedResult:
    """Run server updates in rounds until the complementarity residual
    drops below config.tol.

    Schedules: "sync" visits servers in index order and refreshes totals
    after each one; "random" does the same in a seeded random order;
    "parallel" lets every server update from the totals at the start of
    the round.
    """
    config = config or DistributedConfig()
    t0 = time.perf_counter()
    access = access or ClusterAccess(cluster)
    eps = config.barrier_epsilon
    kappa = config.kappa or default_kappa(cluster, config.rule)
    if len(kappa) != cluster.n_servers:
        raise ValueError("need one kappa per server")
    views = [ServerView.build(access, i) for i in range(cluster.n_servers)]
    x = np.array(start if start is not None else 0.5 * uniform_allocation(cluster).tasks, dtype=float)
    rng = np.random.default_rng(config.seed)
    history = [complementarity_residual(cluster, params, x, eps)]
    status, reason = MAX_ITERS, None
    rounds = 0
    while True:
        if history[-1] <= config.tol:
            status = CONVERGED
            break
        if rounds >= config.max_rounds:
            break
        if config.time_limit is not None and time.perf_counter() - t0 > config.time_limit:
            reason = "time_limit"
            break
        order = rng.permutation(cluster.n_servers) if config.schedule == RANDOM else range(cluster.n_servers)
        frozen = x.sum(axis=1)
        new = x.copy()
        try:
            for i in order:
                view = views[i]
                if view.users.size == 0:
                    continue
                totals = frozen if config.schedule == PARALLEL else new.sum(axis=1)
                local = new[view.users, i]
                upd = server_update(view, params[i], local, totals[view.users], eps, kappa[i], config.rule)
                new[view.users, i] = upd
            res = complementarity_residual(cluster, params, new, eps)
        except (UtilityDomainError, np.linalg.LinAlgError, FloatingPointError) as exc:
            status, reason = STALLED, str(exc)
            break
        if not math.isfinite(res):
            status, reason = STALLED, "non-finite residual"
            break
        x = new
        history.append(res)
        rounds += 1
    lam = np.array([barrier_multipliers(cluster, x, i, eps) for i in range(cluster.n_servers)])
    over = np.maximum(x.T @ cluster.demand - cluster.capacity, 0.0)
    diag = {
        "stall_reason": reason,
        "max_capacity_violation": float(over.max(initial=0.0)),
        "barrier_epsilon": eps,
        "kappa": list(kappa),
        "schedule": config.schedule,
        "rule": config.rule,
    }
    logger.info("distributed %s after %d rounds, residual %.3g", status, rounds, history[-1])
    return DistributedResult(
        Allocation(x),
        lam,
        [],
        rounds,
        status,
        diag,
        elapsed=time.perf_counter() - t0,
        residual_history=history,
        rounds=rounds,
    )


def log_residual_slope(history, skip: int = 0) -> float:
    """Least-squares slope of log(residual) against round index."""
    h = np.asarray(history[skip:], dtype=float)
    h = h[h > 0]
    if h.size < 2:
        return 0.0
    return float(np.polyfit(np.arange(h.size), np.log(h), 1)[0])
