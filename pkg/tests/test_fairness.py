import numpy as np
import pytest

from vdsfair.baselines import solve_drfh, solve_psdsf, solve_tsf
from vdsfair.fairness import (
    PropertyReport,
    check_alpha_pf_vds,
    check_bottleneck_fairness,
    check_envy_freeness,
    check_pareto,
    check_sharing_incentive,
    deviation,
    deviation_summary,
    find_bottleneck,
    validate,
)
from vdsfair.fixtures import random_bottleneck_cluster
from vdsfair.model import TIME_SHARED, Allocation, ServerSpec, UserSpec, build_cluster, uniform_allocation
from vdsfair.psmfa import solve_psmfa
from vdsfair.utility import UtilityParams

CPU, RAM = 0, 1


def single():
    return build_cluster([ServerSpec("S1", (2.0, 4.0))], [UserSpec("u1", (1.0, 1.0), frozenset({"S1"}))])


def twins(eligible=({"S1"}, {"S1"})):
    servers = [ServerSpec("S1", (4.0, 4.0)), ServerSpec("S2", (4.0, 4.0))]
    users = [UserSpec(f"u{k + 1}", (1.0, 1.0), frozenset(e)) for k, e in enumerate(eligible)]
    return build_cluster(servers, users)


@pytest.fixture(scope="module")
def psmfa_b():
    from vdsfair.fixtures import fixture_b

    c = fixture_b()
    return c, {a: solve_psmfa(c, UtilityParams.alpha_fair(c, a)).allocation for a in (1.0, 2.0, 3.0)}


class TestSharingIncentive:
    def test_fixture_a_psdsf(self, cluster_a, psdsf_a):
        r = check_sharing_incentive(cluster_a, psdsf_a)
        assert r.passed and r.witness is None

    def test_fixture_a_drfh(self, cluster_a):
        assert check_sharing_incentive(cluster_a, solve_drfh(cluster_a)).passed

    def test_uniform(self, cluster_b):
        assert check_sharing_incentive(cluster_b, uniform_allocation(cluster_b)).passed
        assert check_sharing_incentive(cluster_b, uniform_allocation(cluster_b, TIME_SHARED)).passed

    def test_failure_has_witness(self, cluster_a, psdsf_a):
        x = psdsf_a.tasks.copy()
        x[0, 0] = 0.5
        r = check_sharing_incentive(cluster_a, Allocation(x))
        assert r.verdict is False and r.witness is not None


class TestEnvyFreeness:
    def test_single_user(self):
        assert check_envy_freeness(single(), Allocation(np.array([[1.0]]))).passed

    def test_solver_output(self, psmfa_b):
        c, out = psmfa_b
        for x in out.values():
            assert check_envy_freeness(c, x).passed
            assert check_sharing_incentive(c, x).passed

    def test_twin_with_double_bundle(self):
        c = twins()
        r = check_envy_freeness(c, Allocation(np.array([[1.0, 0.0], [2.0, 0.0]])))
        assert r.verdict is False and r.witness is not None

    def test_scopes_differ_under_placement(self):
        # u1 cannot reach S2 where u2's larger bundle sits
        c = twins(({"S1"}, {"S2"}))
        x = Allocation(np.array([[1.0, 0.0], [0.0, 4.0]]))
        assert check_envy_freeness(c, x, scope="accessible").passed
        assert check_envy_freeness(c, x, scope="aggregate").verdict is False

    def test_bad_scope(self):
        with pytest.raises(ValueError):
            check_envy_freeness(single(), Allocation(np.array([[1.0]])), scope="x")


class TestBottleneck:
    def test_fixture_a_overall_ram(self, cluster_a):
        assert find_bottleneck(cluster_a).overall == RAM

    def test_fixture_b(self, cluster_b):
        b = find_bottleneck(cluster_b)
        assert b.per_server[0] == RAM
        # u3 is RAM-dominant at S2 and u4 CPU-dominant, so S2 has none
        assert cluster_b.dominant_resource[2, 1] == RAM and cluster_b.dominant_resource[3, 1] == CPU
        assert b.per_server[1] is None and b.overall is None

    def test_single_resource(self):
        c = build_cluster(
            [ServerSpec("S1", (3.0,)), ServerSpec("S2", (5.0,))],
            [UserSpec("u1", (1.0,), frozenset({"S1", "S2"})), UserSpec("u2", (2.0,), frozenset({"S2"}))],
        )
        b = find_bottleneck(c)
        assert b.per_server == (0, 0) and b.overall == 0

    def test_fairness_fixture_a(self, cluster_a, psdsf_a):
        assert check_bottleneck_fairness(cluster_a, psdsf_a).passed
        assert check_bottleneck_fairness(cluster_a, psdsf_a, scope="overall").passed
        drfh = check_bottleneck_fairness(cluster_a, solve_drfh(cluster_a))
        assert drfh.verdict is False and drfh.witness is not None
        assert check_bottleneck_fairness(cluster_a, solve_tsf(cluster_a)).verdict is False

    def test_overall_scope_needs_bottleneck(self, cluster_b, psdsf_b):
        assert check_bottleneck_fairness(cluster_b, psdsf_b, scope="overall").verdict is None

    @pytest.mark.parametrize("seed", range(10))
    def test_random_bottleneck_psdsf(self, seed):
        c = random_bottleneck_cluster(seed)
        assert all(b is not None for b in find_bottleneck(c).per_server)
        assert check_bottleneck_fairness(c, solve_psdsf(c)).passed


class TestPareto:
    def test_alpha_1(self, psmfa_b):
        c, out = psmfa_b
        assert check_pareto(c, out[1.0]).passed

    def test_idle_server(self):
        r = check_pareto(single(), Allocation(np.array([[1.0]])))
        assert r.verdict is False and r.witness is not None

    def test_fixture_a_psdsf(self, cluster_a, psdsf_a):
        assert check_pareto(cluster_a, psdsf_a).passed


class TestAlphaFair:
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0, 10.0])
    def test_single(self, alpha):
        c = single()
        assert check_alpha_pf_vds(c, UtilityParams.alpha_fair(c, alpha), Allocation(np.array([[2.0]]))).passed

    def test_solver_alpha_3(self, psmfa_b):
        c, out = psmfa_b
        assert check_alpha_pf_vds(c, UtilityParams.alpha_fair(c, 3), out[3.0], tol=1e-6).passed

    def test_psdsf_is_not_proportional_fair(self, cluster_b, psdsf_b):
        r = check_alpha_pf_vds(cluster_b, UtilityParams.alpha_fair(cluster_b, 1), psdsf_b)
        assert r.verdict is False


class TestDeviation:
    def test_psdsf_zero(self, cluster_b, psdsf_b):
        np.testing.assert_allclose(deviation(cluster_b, psdsf_b), 0, atol=1e-9)

    def test_alpha_1_positive(self, psmfa_b):
        c, out = psmfa_b
        assert np.nanmax(deviation(c, out[1.0])) > 1e-3
        assert deviation_summary(c, out[1.0])["average"] > deviation_summary(c, out[3.0])["average"]

    def test_single(self):
        assert deviation(single(), Allocation(np.array([[1.5]])), 0) == 0

    def test_idle_user_nan(self, cluster_b, psdsf_b):
        x = psdsf_b.tasks.copy()
        x[0] = 0
        assert np.isnan(deviation(cluster_b, Allocation(x), 0))


def test_validate_report(cluster_a):
    reports = validate(cluster_a, solve_drfh(cluster_a), ("si", "bf"))
    assert [r.name for r in reports] == ["sharing_incentive", "bottleneck_fairness"]
    d = reports[1].to_dict()
    assert d["verdict"] == "fail" and d["witness"]
    with pytest.raises(ValueError):
        validate(cluster_a, solve_drfh(cluster_a), ("xx",))
    with pytest.raises(ValueError):
        PropertyReport("si", False, 1e-6)
