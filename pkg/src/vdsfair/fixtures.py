"""The two-server, four-user example cluster and its variant.

Demand vectors are chosen so that gamma_{1,1}=4, gamma_{2,1}=12,
gamma_{3,2}=16, RAM is the dominant resource of every eligible user at
both servers, and users 1 and 2 need network bandwidth that server 2
lacks.  The variant replaces d_4 with [1, 0.5, 0].
"""

import numpy as np

from .model import ClusterSpec, ServerSpec, UserSpec, build_cluster

RESOURCES = ("cpu", "ram", "net")


def fixture_a() -> ClusterSpec:
    servers = [ServerSpec("S1", (12, 4, 75)), ServerSpec("S2", (8, 16, 0))]
    users = [
        UserSpec("u1", (1, 1, 6), frozenset({"S1"})),
        UserSpec("u2", (0.5, 1 / 3, 6), frozenset({"S1"})),
        UserSpec("u3", (0.25, 1, 0), frozenset({"S1", "S2"})),
        UserSpec("u4", (0.25, 1, 0), frozenset({"S1", "S2"})),
    ]
    return build_cluster(servers, users, RESOURCES)


def fixture_b() -> ClusterSpec:
    a = fixture_a()
    users = list(a.users)
    users[3] = UserSpec("u4", (1, 0.5, 0), frozenset({"S1", "S2"}))
    return build_cluster(list(a.servers), users, RESOURCES)


FIXTURES = {"A": fixture_a, "B": fixture_b}


def _cover(rng: np.random.Generator, n_users: int, n_servers: int, p: float = 0.6) -> np.ndarray:
    """Random eligibility where every user and every server has a partner."""
    elig = rng.random((n_users, n_servers)) < p
    for n in range(n_users):
        if not elig[n].any():
            elig[n, rng.integers(n_servers)] = True
    for i in range(n_servers):
        if not elig[:, i].any():
            elig[rng.integers(n_users), i] = True
    return elig


def random_cluster(
    rng: np.random.Generator | int,
    max_users: int = 6,
    max_servers: int = 3,
    max_resources: int = 3,
    demand_range: tuple[float, float] = (0.1, 2.0),
    capacity_range: tuple[float, float] = (1.0, 20.0),
    weighted: bool = False,
) -> ClusterSpec:
    """Random instance with full eligibility cover and strictly positive data."""
    rng = np.random.default_rng(rng)
    N = int(rng.integers(1, max_users + 1))
    K = int(rng.integers(1, max_servers + 1))
    M = int(rng.integers(1, max_resources + 1))
    caps = rng.uniform(*capacity_range, size=(K, M))
    dem = rng.uniform(*demand_range, size=(N, M))
    elig = _cover(rng, N, K)
    w = rng.uniform(0.5, 2.0, size=N) if weighted else np.ones(N)
    return _assemble(caps, dem, elig, w)


def random_bottleneck_cluster(rng: np.random.Generator | int, max_users: int = 6, max_servers: int = 3, max_resources: int = 3, tries: int = 1000) -> ClusterSpec:
    """Random instance in which every server has a bottleneck resource, i.e.
    one resource that is dominant for all of its eligible users."""
    rng = np.random.default_rng(rng)
    for _ in range(tries):
        N = int(rng.integers(1, max_users + 1))
        K = int(rng.integers(1, max_servers + 1))
        M = int(rng.integers(1, max_resources + 1))
        rho = rng.integers(M, size=K)
        caps = rng.uniform(1.0, 20.0, size=(K, M))
        # scarce bottleneck: shrink the chosen resource at each server
        caps[np.arange(K), rho] *= rng.uniform(0.05, 0.3, size=K)
        dem = rng.uniform(0.1, 2.0, size=(N, M))
        elig = _cover(rng, N, K)
        ok = True
        for i in range(K):
            users = np.flatnonzero(elig[:, i])
            ratio = dem[users] / caps[i]
            if not np.all(ratio[:, rho[i]] >= ratio.max(axis=1)):
                ok = False
                break
        if ok:
            return _assemble(caps, dem, elig, np.ones(N))
    raise RuntimeError("could not draw a bottleneck instance")


def _assemble(caps, dem, elig, weights) -> ClusterSpec:
    K, M = caps.shape
    servers = [ServerSpec(f"S{i + 1}", tuple(caps[i])) for i in range(K)]
    users = [
        UserSpec(f"u{n + 1}", tuple(dem[n]), frozenset(f"S{i + 1}" for i in np.flatnonzero(elig[n])), float(weights[n]))
        for n in range(dem.shape[0])
    ]
    return build_cluster(servers, users, tuple(f"r{r + 1}" for r in range(M)))
