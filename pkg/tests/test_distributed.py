import numpy as np
import pytest

from vdsfair.distributed import (
    SCHEDULES,
    ClusterAccess,
    DistributedConfig,
    barrier_multipliers,
    complementarity_residual,
    local_direction,
    log_residual_slope,
    solve_distributed,
)
from vdsfair.model import IneligiblePairError, ServerSpec, UserSpec, build_cluster
from vdsfair.psmfa import CONVERGED, MAX_ITERS, solve_psmfa
from vdsfair.utility import UtilityDomainError, UtilityParams


def single(cap=(2.0, 4.0), dem=(1.0, 1.0)):
    return build_cluster([ServerSpec("S1", cap)], [UserSpec("u1", dem, frozenset({"S1"}))])


class TestBarrier:
    @pytest.mark.parametrize("used, expected", [(2.0 - 0.1, 0.0), (2.0, 10.0), (2.1, 20.0), (1.0, 0.0)])
    def test_values(self, used, expected):
        lam = barrier_multipliers(single(), np.array([[used]]), 0, 0.1)
        assert lam[0] == pytest.approx(expected)

    def test_positive_epsilon(self):
        with pytest.raises(ValueError):
            barrier_multipliers(single(), np.array([[1.0]]), 0, 0.0)


class TestLocalDirection:
    def test_push_up_when_slack(self):
        c = single()
        p = UtilityParams.alpha_fair(c, 1.0)
        assert local_direction(c, p, np.array([[1.0]]), 0, 0, 1e-2) == pytest.approx(1.0)

    def test_push_down_past_capacity(self):
        c = single()
        p = UtilityParams.alpha_fair(c, 1.0)
        assert local_direction(c, p, np.array([[2.0]]), 0, 0, 1e-2) < 0

    def test_clamped_at_zero(self, cluster_a):
        p = UtilityParams.alpha_fair(cluster_a, 1.0)
        x = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
        x[2, 0] = 0.0
        assert local_direction(cluster_a, p, x, 2, 0, 1e-2) >= 0
        # S1 is far over capacity: the raw step is negative, the clamp gives 0
        x = np.array([[10.0, 0], [10.0, 0], [0, 1.0], [0, 1.0]])
        assert local_direction(cluster_a, p, x, 2, 0, 1e-2) == 0.0

    def test_ineligible_and_empty(self, cluster_a):
        p = UtilityParams.alpha_fair(cluster_a, 1.0)
        x = np.ones((4, 2))
        with pytest.raises(IneligiblePairError):
            local_direction(cluster_a, p, x, 0, 1, 1e-2)
        x[0] = 0
        with pytest.raises(UtilityDomainError):
            local_direction(cluster_a, p, x, 0, 0, 1e-2)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_single_user_approaches_gamma(eps):
    c = single()
    r = solve_distributed(c, UtilityParams.alpha_fair(c, 2.0), DistributedConfig(barrier_epsilon=eps))
    assert r.status == CONVERGED
    g = c.gamma[0, 0]
    x = r.allocation.tasks[0, 0]
    assert abs(x - g) <= 2 * eps * g


def test_fixture_b_close_to_centralized(cluster_b):
    p = UtilityParams.alpha_fair(cluster_b, 3.0)
    ref = solve_psmfa(cluster_b, p).allocation.totals
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        r = solve_distributed(cluster_b, p, DistributedConfig(barrier_epsilon=eps))
        assert r.status == CONVERGED
        assert np.all(r.allocation.tasks >= 0)
        assert log_residual_slope(r.residual_history) < 0
        errs.append(np.max(np.abs(r.allocation.totals - ref) / ref))
    assert errs[-1] <= 1e-2
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("schedule", SCHEDULES)
def test_schedules_agree(cluster_b, schedule):
    p = UtilityParams.alpha_fair(cluster_b, 3.0)
    base = solve_distributed(cluster_b, p, DistributedConfig(barrier_epsilon=1e-3))
    r = solve_distributed(cluster_b, p, DistributedConfig(barrier_epsilon=1e-3, schedule=schedule, seed=7))
    assert r.status == CONVERGED
    np.testing.assert_allclose(r.allocation.totals, base.allocation.totals, rtol=1e-6)


class RecordingAccess(ClusterAccess):
    def __init__(self, cluster):
        super().__init__(cluster)
        self.calls = []
        self.current = None

    def eligible_users(self, i):
        self.current = i
        self.calls.append(("users", i, None))
        return super().eligible_users(i)

    def capacity(self, i):
        self.calls.append(("capacity", self.current, i))
        return super().capacity(i)

    def demand(self, n):
        self.calls.append(("demand", self.current, n))
        return super().demand(n)

    def gamma(self, n, i):
        self.calls.append(("gamma", self.current, (n, i)))
        return super().gamma(n, i)

    def weight(self, n):
        self.calls.append(("weight", self.current, n))
        return super().weight(n)


def test_servers_read_only_local_data(cluster_b):
    access = RecordingAccess(cluster_b)
    solve_distributed(cluster_b, UtilityParams.alpha_fair(cluster_b, 3.0), DistributedConfig(), access=access)
    assert access.calls
    for kind, server, arg in access.calls:
        if kind == "capacity":
            assert arg == server
        elif kind in ("demand", "weight"):
            assert cluster_b.eligible[arg, server]
        elif kind == "gamma":
            assert arg[1] == server and cluster_b.eligible[arg[0], server]


def test_literal_gradient_rule_is_slow_but_descends(cluster_b):
    p = UtilityParams.alpha_fair(cluster_b, 3.0)
    cfg = DistributedConfig(barrier_epsilon=1e-2, rule="gradient", kappa=(1e-5, 1e-5), max_rounds=2000)
    r = solve_distributed(cluster_b, p, cfg)
    assert r.status == MAX_ITERS
    assert r.residual_history[-1] < r.residual_history[0]
    assert np.all(r.allocation.tasks >= 0)


def test_residual_csv_and_complementarity(cluster_b):
    p = UtilityParams.alpha_fair(cluster_b, 3.0)
    r = solve_distributed(cluster_b, p, DistributedConfig(barrier_epsilon=1e-3))
    lines = r.residual_csv().strip().splitlines()
    assert len(lines) == r.rounds + 2
    assert complementarity_residual(cluster_b, p, r.allocation.tasks, 1e-3) == pytest.approx(r.residual_history[-1])


def test_log_residual_slope():
    h = [np.exp(-0.5 * k) for k in range(10)]
    assert log_residual_slope(h) == pytest.approx(-0.5)
    assert log_residual_slope([1.0]) == 0.0


@pytest.mark.parametrize(
    "kw", [dict(barrier_epsilon=0), dict(kappa=(0.0,)), dict(rule="x"), dict(schedule="x"), dict(max_rounds=0)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DistributedConfig(**kw)
