import json
import math

import numpy as np
import pytest

from vdsfair.baselines import solve_psdsf
from vdsfair.fairness import check_alpha_pf_vds
from vdsfair.fixtures import random_cluster
from vdsfair.model import (
    Allocation,
    ServerSpec,
    UserSpec,
    build_cluster,
    is_feasible,
    saturated_set,
    uniform_allocation,
)
from vdsfair.psmfa import (
    CONVERGED,
    MAX_ITERS,
    SolverConfig,
    _make_state,
    _Pairs,
    direction_lambda,
    direction_x,
    f_capacity,
    f_user,
    fb,
    initialize,
    line_search,
    merit,
    merit_gradient,
    psi,
    psi_partials,
    reconstruct_multipliers,
    solve_psmfa,
)
from vdsfair.utility import ServerUtility, UtilityDomainError, UtilityParams, g_prime

from oracles import central_gradient, proportional_fair

CPU, RAM = 0, 1


def single(cap=(2.0, 4.0), dem=(1.0, 1.0)):
    return build_cluster([ServerSpec("S1", cap)], [UserSpec("u1", dem, frozenset({"S1"}))])


class TestFischerBurmeister:
    def test_values(self):
        assert fb(0, 0) == 0
        assert fb(3, 4) == pytest.approx(-2)
        assert fb(2.5, 0) == 0
        assert psi(3, 4) == pytest.approx(2)
        assert psi(1, 1) == pytest.approx(0.5 * (math.sqrt(2) - 2) ** 2)

    def test_stable_form_matches_definition(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 500)) * 10
        np.testing.assert_allclose(fb(a, b), np.hypot(a, b) - a - b, atol=1e-12)

    def test_zero_set_is_complementarity(self):
        assert fb(1e8, 1e-8) < 0
        assert fb(-1e-3, 5) > 0
        assert fb(0, 7) == 0

    def test_partials(self):
        g = central_gradient(lambda v: psi(v[0], v[1]), [0.3, -0.7])
        np.testing.assert_allclose(psi_partials(0.3, -0.7), g, rtol=1e-6)
        assert psi_partials(0.0, 0.0) == (0.0, 0.0)


class TestResiduals:
    def test_f_capacity(self, cluster_a, psdsf_a):
        assert f_capacity(cluster_a, psdsf_a.tasks, 0, RAM) == pytest.approx(0)
        assert f_capacity(cluster_a, psdsf_a.tasks, 0, CPU) == pytest.approx(7)
        assert f_capacity(cluster_a, np.zeros((4, 2)), 1, CPU) == 8

    def test_f_user_solved_stationarity(self):
        c = single()
        p = UtilityParams.alpha_fair(c, 1.0)
        g = c.gamma[0, 0]
        lam = np.zeros((1, 2))
        lam[0, c.dominant_resource[0, 0]] = g_prime(1, 1, 0, 1.0) / (g * c.demand[0, c.dominant_resource[0, 0]])
        assert f_user(c, p, np.array([[g]]), lam, 0, 0) == pytest.approx(0, abs=1e-15)
        assert f_user(c, p, np.array([[g]]), np.zeros((1, 2)), 0, 0) < 0

    def test_f_user_zero_total(self, cluster_a):
        with pytest.raises(UtilityDomainError):
            f_user(cluster_a, UtilityParams.alpha_fair(cluster_a, 1), np.zeros((4, 2)), np.zeros((2, 3)), 0, 0)

    def test_reconstruction_zeroes_bottleneck_server(self, cluster_b, psdsf_b):
        # S1 has RAM as its bottleneck, so one multiplier fits u1 and u2
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        lam = reconstruct_multipliers(cluster_b, p, psdsf_b.tasks)
        for n in (0, 1):
            assert abs(f_user(cluster_b, p, psdsf_b.tasks, lam, n, 0)) <= 1e-8

    def test_no_single_multiplier_at_s2_of_fixture_b(self, cluster_b, psdsf_b):
        # only CPU is saturated at S2, and u3, u4 need different CPU prices
        assert saturated_set(cluster_b, psdsf_b)[1] == {CPU}
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        x = psdsf_b.tasks
        need = [g_prime(1, 1, 0, x[n].sum() / cluster_b.gamma[n, 1]) / (cluster_b.gamma[n, 1] * cluster_b.demand[n, CPU]) for n in (2, 3)]
        assert abs(need[0] - need[1]) > 1e-3

    def test_merit_positive_on_fixture_b_psdsf(self, cluster_b, psdsf_b):
        # without a bottleneck at S2 the PS-DSF point is not a solution
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        lam = reconstruct_multipliers(cluster_b, p, psdsf_b.tasks)
        assert merit(cluster_b, p, psdsf_b.tasks, lam) > 1e-4

    def test_merit_zero_on_bottleneck_fixture(self, cluster_a, psdsf_a):
        for a in (1.0, 3.0):
            p = UtilityParams.alpha_fair(cluster_a, a)
            lam = reconstruct_multipliers(cluster_a, p, psdsf_a.tasks)
            assert merit(cluster_a, p, psdsf_a.tasks, lam) <= 1e-12
            gx, gl = merit_gradient(cluster_a, p, psdsf_a.tasks, lam)
            assert np.abs(gx).max() <= 1e-6 and np.abs(gl).max() <= 1e-6
            y = psdsf_a.tasks.copy()
            y[2, 1] += 0.1
            assert merit(cluster_a, p, y, lam) > 1e-6


def _interior(cluster, rng):
    x = rng.uniform(0.05, 0.45, cluster.gamma.shape) * cluster.gamma / cluster.n_users
    lam = rng.uniform(0, 1, (cluster.n_servers, cluster.n_resources))
    return x, lam


@pytest.mark.parametrize("name", ["cluster_a", "cluster_b"])
@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
def test_gradient_matches_finite_differences(name, alpha, request):
    c = request.getfixturevalue(name)
    p = UtilityParams.alpha_fair(c, alpha)
    rng = np.random.default_rng(int(alpha))
    n, i = c.pairs()
    for _ in range(20):
        x, lam = _interior(c, rng)
        gx, gl = merit_gradient(c, p, x, lam)

        def fx(v):
            y = np.zeros_like(x)
            y[n, i] = v
            return merit(c, p, y, lam)

        fdx = central_gradient(fx, x[n, i], 1e-7)
        fdl = central_gradient(lambda v: merit(c, p, x, v.reshape(lam.shape)), lam.ravel(), 1e-7)
        scale = max(1e-8, np.abs(fdx).max(), np.abs(fdl).max())
        assert np.abs(gx[n, i] - fdx).max() / scale <= 1e-5
        assert np.abs(gl.ravel() - fdl).max() / scale <= 1e-5
        assert np.all(gx[~c.eligible] == 0)


def test_gradient_cross_server_coupling(cluster_a):
    p = UtilityParams.alpha_fair(cluster_a, 2.0)
    x = np.array([[1.0, 0], [1.0, 0], [1.0, 2.0], [1.0, 1.0]])
    lam = np.zeros((2, 3))
    lam[1, RAM] = 0.05

    def s2_term(v):
        y = x.copy()
        y[2, 0] = v[0]
        return psi(y[2, 1], f_user(cluster_a, p, y, lam, 2, 1))

    coupling = central_gradient(s2_term, [x[2, 0]])[0]
    assert abs(coupling) > 1e-6
    gx, _ = merit_gradient(cluster_a, p, x, lam)

    def total(v):
        y = x.copy()
        y[2, 0] = v[0]
        return merit(cluster_a, p, y, lam)

    full = central_gradient(total, [x[2, 0]])[0]
    assert gx[2, 0] == pytest.approx(full, rel=1e-6)


class TestDirections:
    def _state(self, c, p, x, lam):
        pr = _Pairs(c, p)
        return pr, _make_state(c, pr, pr.flatten(x), lam, 1e-8)

    def test_unsaturated_is_negative_gradient(self, cluster_b):
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        x, lam = initialize(cluster_b)
        pr, st = self._state(cluster_b, p, x, lam)
        np.testing.assert_allclose(direction_x(pr, st), -st.gx)

    def test_descent_inequality(self):
        rng = np.random.default_rng(5)
        for seed in range(40):
            c = random_cluster(seed)
            p = UtilityParams.alpha_fair(c, 1 + seed % 3)
            x = uniform_allocation_scaled(c, rng)
            lam = rng.uniform(0, 1, (c.n_servers, c.n_resources))
            pr, st = self._state(c, p, x, lam)
            v = direction_x(pr, st)
            assert v @ st.gx <= -(v @ v) * (1 - 1e-9) + 1e-12
            vl = direction_lambda(pr, st)
            assert np.all(vl[~st.saturated] == 0)
            assert np.all(vl[st.lam <= 0] >= 0)
            assert st.glam.ravel() @ vl.ravel() <= 1e-12

    def test_equality_cone_blocks_normal_gradient(self):
        c = single()
        p = UtilityParams.alpha_fair(c, 1.0)
        lam = np.array([[1.0, 0.0]])  # CPU is the saturating resource at x = 2
        pr, st = self._state(c, p, np.array([[2.0]]), lam)
        assert direction_x(pr, st)[0] == 0.0

    def test_lambda_direction_zero_and_clamp(self):
        c = single()
        p = UtilityParams.alpha_fair(c, 1.0)
        x = np.array([[2.0]])
        # exact stationarity: gradients vanish, so does the direction
        lam = np.array([[g_prime(1, 1, 0, 1.0) / 2.0, 0.0]])
        pr, st = self._state(c, p, x, lam)
        np.testing.assert_allclose(direction_lambda(pr, st), 0, atol=1e-14)
        # price too high at lambda > 0 pulls lambda down; at lambda = 0 any
        # downward move is clamped
        pr, st = self._state(c, p, x, np.array([[5.0, 0.0]]))
        assert direction_lambda(pr, st)[0, 0] < 0
        pr, st = self._state(c, p, np.array([[1.0]]), np.zeros((1, 2)))
        assert np.all(direction_lambda(pr, st) == 0)


def uniform_allocation_scaled(c, rng):
    x = uniform_allocation(c).tasks * rng.uniform(0.3, 1.0)
    if rng.random() < 0.5:
        x = x / (x.T @ c.demand / c.capacity).max(axis=1).max()  # touch a face
    return x


class TestLineSearch:
    def test_full_step_with_slack(self, cluster_b):
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        pr = _Pairs(cluster_b, p)
        x, lam = initialize(cluster_b)
        st = _make_state(cluster_b, pr, pr.flatten(x), lam, 1e-8)
        v = -1e-4 * st.gx / np.abs(st.gx).max()
        step = line_search(cluster_b, pr, st, v, np.zeros_like(lam), SolverConfig(), 1.0)
        assert step.eta == 1.0 and step.state.merit < st.merit

    def test_capped_at_face(self, cluster_b):
        p = UtilityParams.alpha_fair(cluster_b, 1.0)
        pr = _Pairs(cluster_b, p)
        x, lam = initialize(cluster_b)
        st = _make_state(cluster_b, pr, pr.flatten(x), lam, 1e-8)
        v = np.where(st.gx < 0, -st.gx, 0.0) * 1e3
        dx = pr.dense(v)
        used = x.T @ cluster_b.demand
        rate = dx.T @ cluster_b.demand
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = np.nanmin(np.where(rate > 0, (cluster_b.capacity - used) / rate, np.inf))
        step = line_search(cluster_b, pr, st, v, np.zeros_like(lam), SolverConfig(), 1.0)
        assert step.state is not None
        assert 0 < step.eta <= cross * (1 + 1e-12)
        assert is_feasible(cluster_b, Allocation(pr.dense(step.state.xp)))


class TestInitialize:
    def test_fixture_a(self, cluster_a):
        x, lam = initialize(cluster_a)
        assert x[0].sum() == pytest.approx(0.5)
        slack = cluster_a.capacity - x.T @ cluster_a.demand
        assert np.all(slack[cluster_a.capacity > 0] > 0)
        assert np.all(lam == 0)

    def test_random(self):
        for seed in range(30):
            c = random_cluster(seed, weighted=True)
            x, _ = initialize(c)
            assert is_feasible(c, Allocation(x))
            assert all(not s for s in saturated_set(c, x))
            assert np.all(x.sum(axis=1) > 0)


class TestSolve:
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0, 20.0])
    def test_single_user_fills_server(self, alpha):
        c = single()
        r = solve_psmfa(c, UtilityParams.alpha_fair(c, alpha))
        assert r.converged
        assert r.allocation.tasks[0, 0] == pytest.approx(c.gamma[0, 0], rel=1e-9)

    def test_fixture_b_alpha_50_near_psdsf(self, cluster_b):
        r = solve_psmfa(cluster_b, UtilityParams.alpha_fair(cluster_b, 50))
        ps = np.array([2, 6, 32 / 3, 16 / 3])
        assert r.converged
        assert np.max(np.abs(r.allocation.totals - ps) / ps) <= 1e-2

    def test_fixture_b_alpha_1_is_proportional_fair(self, cluster_b):
        r = solve_psmfa(cluster_b, UtilityParams.alpha_fair(cluster_b, 1))
        np.testing.assert_allclose(r.allocation.totals, proportional_fair(cluster_b), atol=1e-4)

    @pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
    def test_fixture_b_run(self, cluster_b, alpha):
        p = UtilityParams.alpha_fair(cluster_b, alpha)
        r = solve_psmfa(cluster_b, p, SolverConfig(record_iterates=True))
        assert r.status == CONVERGED and r.merit_history[-1] <= 1e-10
        assert np.all(np.diff(r.merit_history) < 0)
        assert all(a.feasible and a.lambda_support_ok and a.min_x >= 0 for a in r.iterates)
        assert check_alpha_pf_vds(cluster_b, p, r.allocation).passed
        d = r.diagnostics
        assert d["complementarity_user"] <= 1e-5
        assert {"positive_multipliers", "degenerate_saturation", "stall_reason", "raw_merit"} <= set(d)

    def test_extended_utility(self, cluster_b):
        p = UtilityParams(tuple(ServerUtility(2.0, 1.0, 0.5) for _ in range(2)))
        r = solve_psmfa(cluster_b, p)
        assert r.converged and check_alpha_pf_vds(cluster_b, p, r.allocation).passed

    def test_large_alpha_matches_psdsf_on_bottleneck_fixture(self, cluster_a):
        r = solve_psmfa(cluster_a, UtilityParams.alpha_fair(cluster_a, 50))
        np.testing.assert_allclose(r.allocation.totals, solve_psdsf(cluster_a).totals, rtol=1e-6)

    def test_max_iters_returns_best_iterate(self, cluster_b):
        cfg = SolverConfig(max_iters=2, restart_reassign=0, restart_barrier=None, restart_fractions=())
        r = solve_psmfa(cluster_b, UtilityParams.alpha_fair(cluster_b, 1), cfg)
        assert r.status == MAX_ITERS
        assert r.merit_history[-1] < r.merit_history[0]
        assert is_feasible(cluster_b, r.allocation)

    def test_plain_gradient_decreases_merit(self, cluster_b):
        cfg = SolverConfig.plain(max_iters=200)
        r = solve_psmfa(cluster_b, UtilityParams.alpha_fair(cluster_b, 3), cfg)
        assert np.all(np.diff(r.merit_history) < 0)
        assert r.merit_history[-1] < 1e-2 * r.merit_history[0]

    def test_wrong_params_length(self, cluster_b):
        with pytest.raises(ValueError):
            solve_psmfa(cluster_b, UtilityParams.uniform(3, 1.0))

    @pytest.mark.parametrize(
        "kw", [dict(backtrack_factor=1.0), dict(merit_tol=0), dict(direction="newton"), dict(max_iters=0), dict(damping=-1)]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_deterministic(self, cluster_b):
        p = UtilityParams.alpha_fair(cluster_b, 2)
        a, b = solve_psmfa(cluster_b, p), solve_psmfa(cluster_b, p)
        assert np.array_equal(a.allocation.tasks, b.allocation.tasks)
        assert a.merit_history == b.merit_history

    def test_result_json(self, cluster_b):
        r = solve_psmfa(cluster_b, UtilityParams.alpha_fair(cluster_b, 1))
        doc = json.loads(json.dumps(r.to_dict(cluster_b)))
        assert doc["status"] == "converged" and set(doc["totals"]) == {"u1", "u2", "u3", "u4"}
