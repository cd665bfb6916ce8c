import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condkl import active_learning
from condkl.active_learning import (
    METHOD_1,
    METHOD_2,
    CampaignError,
    acquire_method1,
    acquire_method2,
    method2_criterion,
    run_campaign,
    sample_cross_covariances,
)
from condkl.conditioning import condition_then_truncate
from condkl.grid import StructuredGrid
from condkl.kernel_gp import KernelHyperparams, ObservationSet
from condkl.kl_expansion import separable_kl_basis
from condkl.pde_solver import DiffusionProblem

THETA = KernelHyperparams(0.65, 0.3, 0.3)


def _direct_variance(X, theta, Q):
    def k(A, B):
        d = A[:, None, :] - B[None, :, :]
        return theta.sigma**2 * np.exp(-(d[..., 0] / theta.l1) ** 2 - (d[..., 1] / theta.l2) ** 2)

    K = k(X, X) + theta.sigma_eps**2 * np.eye(len(X))
    kq = k(X, Q)
    return theta.sigma**2 - np.sum(kq * np.linalg.solve(K, kq), axis=0)


def test_method1_single_candidate():
    obs = ObservationSet([[0.5, 0.5]], [0.1])
    res = acquire_method1(obs, THETA, [[1.2, 0.3]])
    assert res.index == 0 and res.method == METHOD_1
    np.testing.assert_allclose(res.location, [1.2, 0.3])


def test_method1_dense_scan_oracle():
    obs = ObservationSet([[0.3, 0.5], [0.9, 0.5], [1.6, 0.5]], [0.1, -0.2, 0.0])
    theta = THETA.replace(sigma_eps=0.01)
    line = np.column_stack([np.linspace(0, 2, 401), np.full(401, 0.5)])
    res = acquire_method1(obs, theta, line)
    expect = _direct_variance(obs.locations, theta, line)
    np.testing.assert_allclose(res.criterion, expect, atol=1e-12)
    assert res.index == int(np.argmax(expect))


def test_method1_never_picks_near_duplicate():
    x = np.array([0.8, 0.4])
    obs = ObservationSet([x], [0.0])
    cand = np.array([x + 1e-9, [0.81, 0.41], [0.95, 0.6]])
    assert acquire_method1(obs, THETA, cand).index != 0


def test_method1_ties_go_to_first():
    obs = ObservationSet([[1.0, 0.5]], [0.0])
    cand = [[0.5, 0.5], [1.5, 0.5]]
    assert acquire_method1(obs, THETA, cand).index == 0


def test_cross_covariance_double_loop():
    rng = np.random.default_rng(0)
    M, n = 5, 4
    g = rng.standard_normal((M, n))
    u = rng.standard_normal((M, n))
    cross = sample_cross_covariances(g, u)
    gm, um = g.mean(axis=0), u.mean(axis=0)
    for i in range(n):
        for j in range(n):
            c = sum((u[m, i] - um[i]) * (g[m, j] - gm[j]) for m in range(M)) / (M - 1)
            assert cross.cov_ug()[i, j] == pytest.approx(c, abs=1e-14)
    np.testing.assert_allclose(cross.var_g, g.var(axis=0, ddof=1), rtol=1e-13)
    np.testing.assert_allclose(cross.column(2), cross.cov_ug()[:, 2], rtol=1e-13)


def test_self_cross_covariance_is_covariance():
    g = np.random.default_rng(1).standard_normal((30, 6))
    cross = sample_cross_covariances(g, g)
    np.testing.assert_allclose(cross.cov_ug(), np.cov(g.T), atol=1e-13)


def test_cross_covariance_rejects_bad_shapes():
    with pytest.raises(ValueError):
        sample_cross_covariances(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        sample_cross_covariances(np.zeros((1, 2)), np.zeros((1, 2)))


def test_constant_ensembles_give_zero():
    cross = sample_cross_covariances(np.ones((7, 3)), np.full((7, 3), 2.0))
    np.testing.assert_array_equal(cross.cov_ug(), 0.0)
    J, bound = method2_criterion(cross, np.ones(3), [0, 1, 2], 1.0)
    assert bound == 0.0 and np.all(np.isnan(J))


def test_uncorrelated_output_ties_to_first_candidate():
    # g varies but u is constant: every candidate leaves J at the bound
    g = np.random.default_rng(2).standard_normal((10, 4))
    cross = sample_cross_covariances(g, np.zeros((10, 4)))
    J, bound = method2_criterion(cross, np.full(4, 0.25), np.arange(4), 1.0)
    np.testing.assert_array_equal(J, bound)
    assert int(np.nanargmin(J)) == 0


def test_two_candidate_toy_by_hand():
    g = np.array([[1.0, 0.0], [-1.0, 2.0], [0.0, -2.0]])
    u = np.array([[2.0, 1.0], [-2.0, 0.0], [0.0, -1.0]])
    w = np.array([0.5, 1.5])
    cross = sample_cross_covariances(g, u)
    # by hand: var_g = (1, 4), var_u = (4, 1), cov_ug = [[2, -2], [0.5, 1]]
    np.testing.assert_allclose(cross.var_g, [1, 4])
    np.testing.assert_allclose(cross.var_u, [4, 1])
    np.testing.assert_allclose(cross.cov_ug(), [[2, -2], [0.5, 1]])
    J, bound = method2_criterion(cross, w, [0, 1], 1.0)
    assert bound == pytest.approx(0.5 * 4 + 1.5 * 1)
    assert J[0] == pytest.approx(bound - (0.5 * 4 + 1.5 * 0.25) / 1)
    assert J[1] == pytest.approx(bound - (0.5 * 4 + 1.5 * 1) / 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 8))
def test_method2_criterion_bounds(seed, M, n):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((M, n))
    u = g @ rng.standard_normal((n, n)) + rng.standard_normal((M, n))
    cross = sample_cross_covariances(g, u)
    w = rng.uniform(0.1, 1.0, n)
    J, bound = method2_criterion(cross, w, np.arange(n), 1.0)
    ok = ~np.isnan(J)
    tol = 1e-10 * max(bound, 1.0)
    assert np.all(J[ok] >= -tol) and np.all(J[ok] <= bound + tol)


@pytest.fixture(scope="module")
def small_problem():
    grid = StructuredGrid(10, 5)
    basis = separable_kl_basis(grid, THETA, fraction=0.999)
    g_ref = basis.modes @ np.random.default_rng(4).standard_normal(basis.d)
    X = np.array([[0.3, 0.3], [1.1, 0.7]])
    obs = ObservationSet(X, grid.interpolate(g_ref, X))
    return grid, g_ref, obs, DiffusionProblem(grid)


def test_acquire_method2_returns_candidate(small_problem):
    grid, g_ref, obs, problem = small_problem
    model = condition_then_truncate(obs, THETA, grid, fraction=0.99)
    cand = np.arange(5, grid.n, 3)
    res = acquire_method2(obs, THETA, model, problem, M=40, seed=1, candidates=cand)
    assert res.method == METHOD_2 and 0 <= res.index < len(cand)
    np.testing.assert_allclose(res.location, grid.points[cand[res.index]])
    assert res.criterion[res.index] == np.nanmin(res.criterion)
    with pytest.raises(ValueError):
        acquire_method2(obs, THETA, model, problem, M=1)


def _campaign(small_problem, method, **kw):
    grid, g_ref, obs, problem = small_problem
    opts = dict(mc_samples=64, ensemble_size=32, seed=3)
    opts.update(kw)
    return run_campaign(g_ref, obs, THETA, method, 3, problem, **opts)


@pytest.mark.parametrize("method", [METHOD_1, METHOD_2])
def test_campaign_deterministic_across_threads(small_problem, method):
    a = _campaign(small_problem, method, threads=1)
    b = _campaign(small_problem, method, threads=3)
    assert a.table() == b.table()
    assert len(a.records) == 4 and a.records[0].step == 0


@pytest.mark.parametrize("method", [METHOD_1, METHOD_2])
def test_campaign_locations_are_new_nodes(small_problem, method):
    grid, _, obs, _ = small_problem
    camp = _campaign(small_problem, method)
    picked = [(r.x1, r.x2) for r in camp.records[1:]]
    assert len(set(picked)) == len(picked)
    for p in picked:
        assert np.min(np.linalg.norm(obs.locations - p, axis=1)) > 0
    assert camp.observations.n == obs.n + 3


def test_method1_campaign_g_norm_monotone(small_problem):
    camp = _campaign(small_problem, METHOD_1)
    norms = [r.norm_g for r in camp.records]
    assert np.all(np.diff(norms) <= 1e-12)


def test_method2_records_criterion_range(small_problem):
    camp = _campaign(small_problem, METHOD_2, keep_criteria=True)
    for r in camp.records[1:]:
        assert 0 <= r.criterion_min <= r.criterion_max <= r.criterion_bound * (1 + 1e-10)
    assert len(camp.criteria) == 3


def test_campaign_error_keeps_partial(small_problem, monkeypatch):
    calls = {"n": 0}
    original = active_learning.acquire_method1

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("boom")
        return original(*args, **kwargs)

    monkeypatch.setattr(active_learning, "acquire_method1", flaky)
    with pytest.raises(CampaignError) as info:
        _campaign(small_problem, METHOD_1)
    assert len(info.value.campaign.records) == 2


def test_campaign_rejects_bad_arguments(small_problem):
    grid, g_ref, obs, problem = small_problem
    with pytest.raises(ValueError):
        run_campaign(g_ref, obs, THETA, "method-3", 2, problem)
    with pytest.raises(ValueError):
        run_campaign(g_ref, obs, THETA, METHOD_1, 0, problem)
