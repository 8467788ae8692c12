from fractions import Fraction

import numpy as np
import pytest

from vdsfair.baselines import (
    MECHANISMS,
    audit_psdsf,
    global_shares,
    run_baseline,
    solve_drfh,
    solve_psdsf,
    solve_tsf,
    water_fill,
)
from vdsfair.fixtures import random_cluster
from vdsfair.model import TIME_SHARED, Allocation, ServerSpec, UserSpec, build_cluster, is_feasible, vds
from vdsfair.psmfa import solve_psmfa
from vdsfair.utility import UtilityParams

from oracles import max_min_violations, psdsf_violations

NET = 2


def one_server(n_users=3, seed=0):
    rng = np.random.default_rng(seed)
    users = [UserSpec(f"u{k}", tuple(rng.uniform(0.1, 1, 3)), frozenset({"S1"}), float(rng.uniform(0.5, 2))) for k in range(n_users)]
    return build_cluster([ServerSpec("S1", (10.0, 12.0, 9.0))], users)


def drf_levels(cluster, x):
    share = np.max(cluster.demand / cluster.capacity[0], axis=1)
    return share * x.sum(axis=1) / cluster.weights


class TestGoldens:
    def test_psdsf_fixture_a(self, cluster_a):
        np.testing.assert_allclose(solve_psdsf(cluster_a).totals, [2, 6, 8, 8], atol=1e-9)

    def test_psdsf_fixture_b(self, cluster_b):
        x = solve_psdsf(cluster_b)
        np.testing.assert_allclose(x.totals, [2, 6, 32 / 3, 16 / 3], atol=1e-9)

    def test_psdsf_fixture_b_vds(self, cluster_b):
        x = solve_psdsf(cluster_b)
        expected = {(0, 0): 0.5, (1, 0): 0.5, (2, 0): Fraction(8, 3), (3, 0): Fraction(2, 3), (2, 1): Fraction(2, 3), (3, 1): Fraction(2, 3)}
        for (n, i), v in expected.items():
            assert vds(cluster_b, x, n, i) == pytest.approx(float(v), abs=1e-9)

    def test_drfh_fixture_a(self, cluster_a):
        np.testing.assert_allclose(solve_drfh(cluster_a).totals, [3, 3, 8, 8], atol=1e-9)

    def test_tsf_fixture_a(self, cluster_a):
        np.testing.assert_allclose(solve_tsf(cluster_a).totals, [5 / 3, 5, 25 / 3, 25 / 3], atol=1e-9)

    def test_tsf_gamma(self, cluster_a):
        np.testing.assert_allclose(cluster_a.gamma.sum(axis=1), [4, 12, 20, 20])


class TestGlobalShares:
    def test_drfh_shares(self, cluster_a):
        g = global_shares(cluster_a, solve_drfh(cluster_a))
        assert g.shares[2] == pytest.approx(0.4) and g.shares[3] == pytest.approx(0.4)

    def test_zero(self, cluster_a):
        assert np.all(global_shares(cluster_a).shares == 0)

    def test_network_dominant_for_first_users(self, cluster_a):
        g = global_shares(cluster_a)
        assert g.dominant[0] == NET and g.dominant[1] == NET


@pytest.mark.parametrize("mechanism", ["psdsf", "drfh", "tsf"])
@pytest.mark.parametrize("seed", range(4))
def test_single_server_is_drf(mechanism, seed):
    c = one_server(3 + seed, seed)
    x = run_baseline(c, mechanism)
    levels = drf_levels(c, x.tasks)
    np.testing.assert_allclose(levels, levels[0], rtol=1e-9)
    assert audit_psdsf(c, x) == []


def test_homogeneous_users_get_equal_tasks():
    users = [UserSpec(f"u{k}", (1.0, 2.0), frozenset({"S1"})) for k in range(4)]
    c = build_cluster([ServerSpec("S1", (10.0, 10.0))], users)
    for mech in ("psdsf", "drfh", "tsf"):
        np.testing.assert_allclose(run_baseline(c, mech).totals, 1.25, rtol=1e-12)


class TestWaterFill:
    def test_single_resource(self):
        x = water_fill(np.array([[1.0], [1.0]]), np.array([4.0]), np.array([1.0, 1.0]), np.array([0.0, 1.0]))
        np.testing.assert_allclose(x, [2.5, 1.5])

    def test_blocked_user_stops(self):
        # u1 needs resource 0, which runs out first; u2 keeps growing on resource 1
        x, blocked, events = water_fill(
            np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 5.0]), np.array([1.0, 1.0]), np.zeros(2), detail=True
        )
        np.testing.assert_allclose(x, [1.0, 5.0])
        assert blocked[0] < blocked[1]
        assert list(events[0][1]) == [0]


class TestOracleAudits:
    @pytest.mark.parametrize("seed", range(25))
    def test_psdsf(self, seed):
        c = random_cluster(seed, weighted=seed % 2 == 1)
        x = solve_psdsf(c)
        assert is_feasible(c, x)
        assert psdsf_violations(c, x.tasks) == []
        assert audit_psdsf(c, x) == []

    @pytest.mark.parametrize("seed", range(25))
    def test_drfh_tsf_max_min(self, seed):
        c = random_cluster(seed, weighted=seed % 2 == 1)
        ratio = np.max(np.where(c.capacity.sum(axis=0) > 0, c.demand / np.maximum(c.capacity.sum(axis=0), 1e-300), 0), axis=1)
        for alloc, per_task in ((solve_drfh(c), ratio / c.weights), (solve_tsf(c), 1 / (c.gamma.sum(axis=1) * c.weights))):
            assert is_feasible(c, alloc)
            assert max_min_violations(c, alloc.tasks, per_task) == []

    def test_oracle_flags_a_bad_allocation(self, cluster_a):
        x = solve_psdsf(cluster_a).tasks.copy()
        x[2, 1] -= 1.0
        assert psdsf_violations(cluster_a, x)
        assert audit_psdsf(cluster_a, Allocation(x))


@pytest.mark.parametrize("name", ["cluster_a", "cluster_b"])
def test_large_alpha_limit(name, request):
    c = request.getfixturevalue(name)
    ps = solve_psdsf(c).totals
    r = solve_psmfa(c, UtilityParams.alpha_fair(c, 50))
    assert np.max(np.abs(r.allocation.totals - ps) / ps) <= 1e-2


@pytest.mark.parametrize("seed", range(10))
def test_time_shared_fills_each_server(seed):
    c = random_cluster(seed)
    x = solve_psdsf(c, TIME_SHARED).tasks
    with np.errstate(divide="ignore", invalid="ignore"):
        load = np.where(c.eligible, x / np.where(c.gamma > 0, c.gamma, 1), 0).sum(axis=0)
    for i in range(c.n_servers):
        if (c.gamma[:, i] > 0).any():
            assert load[i] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("mechanism", ["psdsf", "drfh", "tsf", "uniform"])
def test_permutation_invariance(mechanism):
    c = random_cluster(3)
    perm = np.random.default_rng(1).permutation(c.n_users)
    users = [c.users[k] for k in perm]
    p = build_cluster(list(c.servers), users, c.resources)
    np.testing.assert_allclose(run_baseline(p, mechanism).totals, run_baseline(c, mechanism).totals[perm], rtol=1e-8, atol=1e-10)


def test_unknown_mechanism(cluster_a):
    assert set(MECHANISMS) == {"psdsf", "drfh", "tsf", "uniform"}
    with pytest.raises(ValueError):
        run_baseline(cluster_a, "drf")
