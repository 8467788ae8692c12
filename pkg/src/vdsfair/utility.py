"""Per-server utility family g_i with g_i'(z) = (A_i / z)**alpha_i + B_i / z.

A = 1, B = 0 gives the alpha-fair family g'(z) = z**-alpha.  The functions
accept numpy arrays for z (and for the parameters) so the solvers can
evaluate every eligible pair at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ClusterSpec

Z_MIN = 1e-300


class UtilityDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ServerUtility:
    alpha: float = 1.0
    a_coef: float = 1.0
    b_coef: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.a_coef < 0 or self.b_coef < 0:
            raise ValueError("A and B must be nonnegative")
        if self.a_coef == 0 and self.b_coef == 0:
            raise ValueError("A and B cannot both be zero")

    @property
    def alpha_fair(self) -> bool:
        return self.a_coef == 1.0 and self.b_coef == 0.0


@dataclass(frozen=True)
class UtilityParams:
    """One ServerUtility per server (index-aligned with ClusterSpec.servers)."""

    per_server: tuple[ServerUtility, ...]

    def __getitem__(self, i: int) -> ServerUtility:
        return self.per_server[i]

    def __len__(self):
        return len(self.per_server)

    @classmethod
    def uniform(cls, n_servers: int, alpha: float = 1.0, a_coef: float = 1.0, b_coef: float = 0.0):
        return cls(tuple(ServerUtility(alpha, a_coef, b_coef) for _ in range(n_servers)))

    @classmethod
    def alpha_fair(cls, cluster: ClusterSpec, alpha) -> "UtilityParams":
        """alpha may be a scalar or one value per server."""
        alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (cluster.n_servers,))
        return cls(tuple(ServerUtility(float(a)) for a in alphas))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(alpha, A, B) as length-K arrays."""
        a = np.array([p.alpha for p in self.per_server])
        ac = np.array([p.a_coef for p in self.per_server])
        bc = np.array([p.b_coef for p in self.per_server])
        return a, ac, bc

    @classmethod
    def from_dict(cls, cluster: ClusterSpec, doc: Mapping) -> "UtilityParams":
        def _one(d: Mapping) -> ServerUtility:
            return ServerUtility(float(d.get("alpha", 1.0)), float(d.get("A", 1.0)), float(d.get("B", 0.0)))

        default = _one(doc.get("default", {}))
        per = dict(doc.get("per_server", {}))
        unknown = set(per) - set(cluster.server_ids)
        if unknown:
            raise ValueError(f"params reference unknown servers {sorted(unknown)}")
        return cls(tuple(_one(per[sid]) if sid in per else default for sid in cluster.server_ids))

    def to_dict(self, cluster: ClusterSpec) -> dict:
        return {
            "per_server": {
                sid: {"alpha": p.alpha, "A": p.a_coef, "B": p.b_coef}
                for sid, p in zip(cluster.server_ids, self.per_server)
            }
        }


def load_params(cluster: ClusterSpec, path: str | Path) -> UtilityParams:
    with open(path) as fh:
        return UtilityParams.from_dict(cluster, json.load(fh))


def _check(z):
    z = np.asarray(z, dtype=float)
    if np.any(~(z > Z_MIN)):
        raise UtilityDomainError(f"utility argument must be > {Z_MIN}, got min {np.min(z)!r}")
    return z


def g_prime(alpha, a_coef, b_coef, z):
    z = _check(z)
    return (a_coef / z) ** alpha + b_coef / z


def g_double_prime(alpha, a_coef, b_coef, z):
    z = _check(z)
    return -alpha * a_coef**alpha * z ** (-alpha - 1.0) - b_coef / z**2


def g_value(alpha, a_coef, b_coef, z):
    # antiderivative gauge: log terms vanish at z = 1
    z = _check(z)
    alpha = np.asarray(alpha, dtype=float)
    a_coef = np.asarray(a_coef, dtype=float)
    one = np.isclose(alpha, 1.0)
    safe = np.where(one, 2.0, alpha)
    power = np.where(one, a_coef * np.log(z), a_coef**safe * z ** (1.0 - safe) / (1.0 - safe))
    out = power + b_coef * np.log(z)
    return out if out.ndim else float(out)


def server_utility(cluster: ClusterSpec, params: UtilityParams, x: np.ndarray, i: int) -> float:
    """sum_{n in N_i} phi_n g_i(x_n / (phi_n gamma_{n,i})); -inf if some x_n = 0."""
    x = np.asarray(x, dtype=float)
    users = cluster.eligible_users(i)
    totals = x[users].sum(axis=1)
    phi = cluster.weights[users]
    p = params[i]
    live = totals > 0
    if not live.all():
        # log / negative-power terms diverge at zero; z**(1-alpha) vanishes for alpha < 1
        if p.b_coef > 0 or p.alpha >= 1:
            return float("-inf")
    z = totals[live] / (phi[live] * cluster.gamma[users[live], i])
    return float(np.sum(phi[live] * g_value(p.alpha, p.a_coef, p.b_coef, z)))
