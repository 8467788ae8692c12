"""Cluster, user and allocation types plus the derived per-server quantities.

Notation used throughout the package:

    c[i, r]   capacity of resource r on server i
    d[n, r]   per-task demand of user n for resource r
    phi[n]    weight of user n
    gamma[n, i]  tasks user n could run when monopolizing server i
    x[n, i]   tasks allocated to user n from server i

A user is only eligible at a server if it was declared eligible *and* the
server can run at least some of its tasks (gamma > 0).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DIVISIBLE = "divisible"
TIME_SHARED = "time-shared"
MODES = (DIVISIBLE, TIME_SHARED)

SATURATION_TOL = 1e-8


class ClusterError(ValueError):
    """Raised for malformed cluster descriptions."""


class IneligiblePairError(ValueError):
    """Raised when a quantity is requested for a (user, server) pair outside N_i."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ServerSpec:
    id: str
    capacities: tuple[float, ...]

    def __post_init__(self):
        caps = tuple(float(c) for c in self.capacities)
        if any(not np.isfinite(c) or c < 0 for c in caps):
            raise ClusterError(f"server {self.id}: capacities must be finite and >= 0")
        if not any(c > 0 for c in caps):
            raise ClusterError(f"server {self.id}: needs at least one positive capacity")
        object.__setattr__(self, "capacities", caps)


@dataclass(frozen=True)
class UserSpec:
    id: str
    demand: tuple[float, ...]
    eligible_servers: frozenset[str]
    weight: float = 1.0

    def __post_init__(self):
        dem = tuple(float(v) for v in self.demand)
        if any(not np.isfinite(v) or v < 0 for v in dem):
            raise ClusterError(f"user {self.id}: demands must be finite and >= 0")
        if not any(v > 0 for v in dem):
            raise ClusterError(f"user {self.id}: demand vector is all zero")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise ClusterError(f"user {self.id}: weight must be positive")
        if not self.eligible_servers:
            raise ClusterError(f"user {self.id}: no eligible servers declared")
        object.__setattr__(self, "demand", dem)
        object.__setattr__(self, "eligible_servers", frozenset(self.eligible_servers))
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True, eq=False)
class ClusterSpec:
    """Immutable cluster with derived gamma, dominant resources and N_i.

    Build it with :func:`build_cluster`; the array fields are read-only.
    """

    servers: tuple[ServerSpec, ...]
    users: tuple[UserSpec, ...]
    resources: tuple[str, ...]
    capacity: np.ndarray  # (K, M)
    demand: np.ndarray  # (N, M)
    weights: np.ndarray  # (N,)
    eligible: np.ndarray  # (N, K) bool, effective eligibility
    gamma: np.ndarray  # (N, K), 0 where ineligible
    dominant_resource: np.ndarray  # (N, K) int, -1 where ineligible

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_servers(self) -> int:
        return len(self.servers)

    @property
    def n_resources(self) -> int:
        return len(self.resources)

    @property
    def user_ids(self) -> list[str]:
        return [u.id for u in self.users]

    @property
    def server_ids(self) -> list[str]:
        return [s.id for s in self.servers]

    def user_index(self, uid: str) -> int:
        return self.user_ids.index(uid)

    def server_index(self, sid: str) -> int:
        return self.server_ids.index(sid)

    def eligible_users(self, i: int) -> np.ndarray:
        """Indices of N_i."""
        return np.flatnonzero(self.eligible[:, i])

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(user, server) index arrays of every eligible pair, user-major order."""
        return np.nonzero(self.eligible)

    def to_dict(self) -> dict:
        return {
            "resources": list(self.resources),
            "servers": [{"id": s.id, "capacities": list(s.capacities)} for s in self.servers],
            "users": [
                {
                    "id": u.id,
                    "weight": u.weight,
                    "demand": list(u.demand),
                    "eligible": sorted(u.eligible_servers, key=self.server_ids.index),
                }
                for u in self.users
            ],
        }


def build_cluster(
    servers: Sequence[ServerSpec],
    users: Sequence[UserSpec],
    resources: Sequence[str] | None = None,
) -> ClusterSpec:
    if not servers or not users:
        raise ClusterError("need at least one server and one user")
    m = len(servers[0].capacities)
    for s in servers:
        if len(s.capacities) != m:
            raise ClusterError(f"server {s.id}: expected {m} capacities, got {len(s.capacities)}")
    for u in users:
        if len(u.demand) != m:
            raise ClusterError(f"user {u.id}: expected {m} demands, got {len(u.demand)}")
    if resources is None:
        resources = [f"r{r}" for r in range(m)]
    if len(resources) != m:
        raise ClusterError(f"{len(resources)} resource names for {m} resources")
    sids = [s.id for s in servers]
    if len(set(sids)) != len(sids):
        raise ClusterError("duplicate server ids")
    uids = [u.id for u in users]
    if len(set(uids)) != len(uids):
        raise ClusterError("duplicate user ids")

    cap = np.array([s.capacities for s in servers], dtype=float)
    dem = np.array([u.demand for u in users], dtype=float)
    n_users, n_servers = len(users), len(servers)

    gamma = np.zeros((n_users, n_servers))
    dom = np.full((n_users, n_servers), -1, dtype=int)
    elig = np.zeros((n_users, n_servers), dtype=bool)
    for n, u in enumerate(users):
        unknown = set(u.eligible_servers) - set(sids)
        if unknown:
            raise ClusterError(f"user {u.id}: unknown servers {sorted(unknown)}")
        pos = dem[n] > 0
        for i, s in enumerate(servers):
            if s.id not in u.eligible_servers:
                continue
            g = np.min(cap[i, pos] / dem[n, pos])
            if g <= 0:
                logger.info("user %s dropped from %s: a demanded resource is absent", u.id, s.id)
                continue
            gamma[n, i] = g
            elig[n, i] = True
            dom[n, i] = dominant_resource(cap[i], dem[n])
        if not elig[n].any():
            raise ClusterError(
                f"user {u.id}: no eligible server can run any of its tasks "
                f"(declared {sorted(u.eligible_servers)})"
            )

    weights = np.array([u.weight for u in users], dtype=float)
    dom.setflags(write=False)
    elig.setflags(write=False)
    return ClusterSpec(
        servers=tuple(servers),
        users=tuple(users),
        resources=tuple(resources),
        capacity=_frozen(cap),
        demand=_frozen(dem),
        weights=_frozen(weights),
        eligible=elig,
        gamma=_frozen(gamma),
        dominant_resource=dom,
    )


def dominant_resource(capacity: np.ndarray, demand: np.ndarray) -> int:
    """argmax_r d_r / c_r over resources with c_r > 0; ties go to the lowest index."""
    ratios = np.full(len(capacity), -np.inf)
    ok = capacity > 0
    ratios[ok] = demand[ok] / capacity[ok]
    return int(np.argmax(ratios))


def task_utility(bundle, demand) -> float:
    """Tasks runnable with `bundle`: min over demanded resources of a_r / d_r."""
    bundle = np.asarray(bundle, dtype=float)
    demand = np.asarray(demand, dtype=float)
    pos = demand > 0
    if not pos.any():
        raise ValueError("demand vector has no positive entry")
    return float(np.min(bundle[pos] / demand[pos]))


@dataclass(frozen=True, eq=False)
class Allocation:
    """Task matrix x[n, i] (users x servers)."""

    tasks: np.ndarray
    mode: str = DIVISIBLE

    def __post_init__(self):
        t = np.array(self.tasks, dtype=float)
        if t.ndim != 2:
            raise ValueError("allocation must be a users x servers matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("allocation has non-finite entries")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        t.setflags(write=False)
        object.__setattr__(self, "tasks", t)

    @property
    def totals(self) -> np.ndarray:
        return self.tasks.sum(axis=1)

    @classmethod
    def zeros(cls, cluster: ClusterSpec, mode: str = DIVISIBLE) -> "Allocation":
        return cls(np.zeros((cluster.n_users, cluster.n_servers)), mode)


def vds(cluster: ClusterSpec, alloc: Allocation, n: int, i: int, weighted: bool = False) -> float:
    """Virtual dominant share s_{n,i} = x_n / gamma_{n,i} (divided by phi_n if weighted)."""
    if not cluster.eligible[n, i]:
        raise IneligiblePairError(f"user {cluster.users[n].id} is not eligible at {cluster.servers[i].id}")
    s = alloc.tasks[n].sum() / cluster.gamma[n, i]
    return float(s / cluster.weights[n]) if weighted else float(s)


def vds_matrix(cluster: ClusterSpec, x: np.ndarray, weighted: bool = True) -> np.ndarray:
    """All (weighted) VDS values; NaN at ineligible pairs."""
    totals = np.asarray(x).sum(axis=1)
    out = np.full(cluster.gamma.shape, np.nan)
    scale = cluster.weights if weighted else np.ones(cluster.n_users)
    n, i = cluster.pairs()
    out[n, i] = totals[n] / (scale[n] * cluster.gamma[n, i])
    return out


def usage(cluster: ClusterSpec, x: np.ndarray) -> np.ndarray:
    """(K, M) resource consumption sum_n x[n, i] d[n, r]."""
    return np.asarray(x).T @ cluster.demand


def time_usage(cluster: ClusterSpec, x: np.ndarray) -> np.ndarray:
    """(K,) time fraction sum_n x[n, i] / gamma[n, i] used on each server."""
    x = np.asarray(x)
    out = np.zeros(cluster.n_servers)
    n, i = cluster.pairs()
    np.add.at(out, i, x[n, i] / cluster.gamma[n, i])
    return out


@dataclass
class Violation:
    kind: str  # "capacity" | "time" | "ineligible" | "negative"
    user: str | None
    server: str
    resource: str | None
    amount: float

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: list[Violation] = field(default_factory=list)

    def __bool__(self):
        return self.feasible


def is_feasible(cluster: ClusterSpec, alloc: Allocation, tol: float = 1e-9) -> FeasibilityReport:
    x = alloc.tasks
    if x.shape != (cluster.n_users, cluster.n_servers):
        raise ValueError(f"allocation shape {x.shape} does not match cluster")
    out: list[Violation] = []
    for n, i in zip(*np.nonzero(~cluster.eligible & (x != 0))):
        out.append(Violation("ineligible", cluster.users[n].id, cluster.servers[i].id, None, float(x[n, i])))
    for n, i in zip(*np.nonzero(x < -tol)):
        out.append(Violation("negative", cluster.users[n].id, cluster.servers[i].id, None, float(x[n, i])))
    if alloc.mode == TIME_SHARED:
        over = time_usage(cluster, x) - 1.0
        for i in np.flatnonzero(over > tol):
            out.append(Violation("time", None, cluster.servers[i].id, None, float(over[i])))
    else:
        over = usage(cluster, x) - cluster.capacity
        limit = tol * np.maximum(1.0, cluster.capacity)
        for i, r in zip(*np.nonzero(over > limit)):
            out.append(
                Violation("capacity", None, cluster.servers[i].id, cluster.resources[r], float(over[i, r]))
            )
    return FeasibilityReport(not out, out)


def uniform_allocation(cluster: ClusterSpec, mode: str = DIVISIBLE) -> Allocation:
    """Each user gets the phi_n / sum(phi) slice of every eligible server."""
    share = cluster.weights / cluster.weights.sum()
    return Allocation(cluster.gamma * share[:, None], mode)


def saturated_set(cluster: ClusterSpec, alloc: Allocation | np.ndarray, tol: float = SATURATION_TOL) -> list[set[int]]:
    """Per server, the resources whose slack is within tol * max(1, c)."""
    x = alloc.tasks if isinstance(alloc, Allocation) else np.asarray(alloc)
    slack = cluster.capacity - usage(cluster, x)
    sat = (slack <= tol * np.maximum(1.0, cluster.capacity)) & (cluster.capacity > 0)
    return [set(np.flatnonzero(sat[i]).tolist()) for i in range(cluster.n_servers)]


def utilization(cluster: ClusterSpec, alloc: Allocation) -> tuple[np.ndarray, np.ndarray]:
    """Per (server, resource) utilization (NaN where c = 0) and the per-resource
    capacity-weighted aggregate."""
    use = usage(cluster, alloc.tasks)
    cap = cluster.capacity
    per = np.full(cap.shape, np.nan)
    ok = cap > 0
    per[ok] = use[ok] / cap[ok]
    tot = cap.sum(axis=0)
    agg = np.where(tot > 0, use.sum(axis=0) / np.where(tot > 0, tot, 1.0), np.nan)
    return per, agg


# ---------------------------------------------------------------------------
# file formats


def cluster_from_dict(doc: dict) -> ClusterSpec:
    try:
        resources = list(doc["resources"])
        servers = [ServerSpec(str(s["id"]), tuple(s["capacities"])) for s in doc["servers"]]
        users = [
            UserSpec(
                str(u["id"]),
                tuple(u["demand"]),
                frozenset(str(e) for e in u["eligible"]),
                float(u.get("weight", 1.0)),
            )
            for u in doc["users"]
        ]
    except (KeyError, TypeError) as exc:
        raise ClusterError(f"malformed cluster document: {exc!r}") from exc
    return build_cluster(servers, users, resources)


def load_cluster(path: str | Path) -> ClusterSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ClusterError(f"{path}: invalid JSON ({exc})") from exc
    return cluster_from_dict(doc)


def dump_cluster(cluster: ClusterSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(cluster.to_dict(), fh, indent=2)


def fmt(v: float) -> str:
    """Locale-independent 12 significant digits."""
    return format(float(v), ".12g")


def allocation_to_csv(cluster: ClusterSpec, alloc: Allocation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user", "server", "tasks"])
    for n, i in zip(*cluster.pairs()):
        w.writerow([cluster.users[n].id, cluster.servers[i].id, fmt(alloc.tasks[n, i])])
    return buf.getvalue()


def allocation_from_csv(cluster: ClusterSpec, text: str | Iterable[str], mode: str = DIVISIBLE) -> Allocation:
    lines = text.splitlines() if isinstance(text, str) else list(text)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["user", "server", "tasks"]:
        raise ValueError("allocation CSV must have header user,server,tasks")
    x = np.zeros((cluster.n_users, cluster.n_servers))
    for lineno, row in enumerate(reader, start=2):
        try:
            n = cluster.user_index(row["user"].strip())
            i = cluster.server_index(row["server"].strip())
            x[n, i] = float(row["tasks"])
        except (ValueError, AttributeError) as exc:
            raise ValueError(f"line {lineno}: bad allocation row {row!r}") from exc
    return Allocation(x, mode)
