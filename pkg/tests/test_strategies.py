import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from graphfolio.dependency import CovMatrix
from graphfolio.gatnet import GatConfig, init_params, save_checkpoint, load_checkpoint
from graphfolio.market_data import UniverseSnapshot
from graphfolio.netfilter import CentralityScores, FilteredGraph, peripherality_scores, tmfg_from_weights
from graphfolio.strategies import (
    MeanVarianceError,
    StrategySpec,
    equal_weight,
    gat_weights,
    kkt_residual,
    mean_variance_weights,
    network_index_weights,
    project_simplex,
    solve_mean_variance,
    write_weights_csv,
)

AS_OF = pd.Timestamp("2021-04-01")


def snapshot(n, T=8, seed=0):
    X = np.random.default_rng(seed).normal(0, 0.01, size=(n, T))
    firms = [f"F{k:03d}" for k in range(n)]
    return UniverseSnapshot(AS_OF, firms, T, X, pd.bdate_range("2021-01-01", periods=T))


def scores_from(p):
    p = np.asarray(p, dtype=float)
    return CentralityScores(p, p, p, p)


def cov_matrix(mu, cov):
    n = len(mu)
    return CovMatrix(AS_OF, [f"F{k}" for k in range(n)], np.asarray(cov, float), np.asarray(mu, float))


@pytest.mark.parametrize("n, expected", [(4, 0.25), (1, 1.0)])
def test_equal_weight(n, expected):
    w = equal_weight(snapshot(n))
    assert np.all(w.weights == expected)
    assert w.firms == snapshot(n).firms


@given(st.integers(1, 500))
def test_equal_weight_sums_to_one(n):
    assert abs(equal_weight(snapshot(n, T=2)).weights.sum() - 1) <= 1e-12


def test_network_index_equal_scores():
    w = network_index_weights(scores_from([0.4] * 5))
    np.testing.assert_allclose(w.weights, 0.2, atol=1e-15)


def test_network_index_star():
    star = FilteredGraph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    w = network_index_weights(peripherality_scores(star))
    # p_hub = 1, p_leaf = 14/45; invert and normalize
    inv = np.array([1.0, 45 / 14, 45 / 14, 45 / 14])
    np.testing.assert_allclose(w.weights, inv / inv.sum(), atol=1e-15)
    assert w.weights[0] == pytest.approx(0.0940, abs=5e-5)
    assert w.weights[1] == pytest.approx(0.3020, abs=5e-5)


@given(arrays(float, st.integers(2, 40), elements=st.floats(1e-3, 1.0)))
@settings(max_examples=100, deadline=None)
def test_network_index_simplex_and_monotone(p):
    w = network_index_weights(scores_from(p)).weights
    assert np.all((w > 0) & (w < 1))
    assert abs(w.sum() - 1) <= 1e-9
    bumped = p.copy()
    bumped[0] *= 1.5
    assert network_index_weights(scores_from(bumped)).weights[0] < w[0]


def test_network_index_zero_guard():
    w = network_index_weights(scores_from([0.0, 0.5, 0.25]))
    assert "zero_peripherality" in w.flags
    np.testing.assert_allclose(w.weights, np.array([4, 2, 4]) / 10)


def test_project_simplex_matches_bruteforce_qp():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.normal(size=3)
        p = project_simplex(v)
        grid = [np.array([a, b, 1 - a - b]) for a in np.linspace(0, 1, 201) for b in np.linspace(0, 1, 201) if a + b <= 1]
        best = min(grid, key=lambda x: np.sum((x - v) ** 2))
        assert np.sum((p - v) ** 2) <= np.sum((best - v) ** 2) + 1e-12


def test_min_variance_limit_two_assets():
    mu = np.array([0.1, 0.1])
    cov = np.diag([1.0, 4.0])
    w = mean_variance_weights(cov_matrix(mu, cov), lambda_risk=1e8).weights
    np.testing.assert_allclose(w, [0.8, 0.2], atol=1e-6)


def test_dominant_asset_small_lambda():
    mu = np.array([0.01, 0.05, 0.02])
    cov = np.diag([0.04, 0.01, 0.03])
    w = mean_variance_weights(cov_matrix(mu, cov), lambda_risk=1e-3).weights
    assert w.tolist() == [0.0, 1.0, 0.0]


def test_identical_assets_get_equal_weights():
    cov = np.full((4, 4), 0.5) + 0.5 * np.eye(4)
    w = mean_variance_weights(cov_matrix(np.full(4, 0.03), cov), lambda_risk=2.0).weights
    np.testing.assert_allclose(w, 0.25, atol=1e-8)


def random_instance(seed, n=10):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    cov = (A @ A.T) / n * 1e-4
    mu = rng.normal(5e-4, 5e-4, size=n)
    return mu, (cov + cov.T) / 2


@pytest.mark.parametrize("seed", range(10))
def test_kkt_on_random_instances(seed):
    mu, cov = random_instance(seed)
    w, res, _ = solve_mean_variance(mu, cov, lambda_risk=5.0)
    assert kkt_residual(w, mu, cov, 5.0) < 1e-6
    assert res < 1e-6
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


def test_grid_oracle_three_relevant_assets():
    # assets 3..9 have tiny means and huge independent variances, so the optimum
    # lives on the face spanned by assets 0..2
    rng = np.random.default_rng(7)
    n = 10
    mu = np.concatenate([[0.02, 0.025, 0.015], np.full(7, -1.0)])
    B = rng.normal(size=(3, 3))
    cov = np.zeros((n, n))
    cov[:3, :3] = B @ B.T * 0.01 + 0.01 * np.eye(3)
    cov[3:, 3:] = 10.0 * np.eye(7)
    lam = 1.0
    w, _, _ = solve_mean_variance(mu, cov, lam)
    assert np.all(w[3:] == 0)

    C3 = cov[:3, :3]

    def grid_best(i, j, total, step):
        ok = (i >= 0) & (j >= 0) & (i + j <= total)
        x = np.stack([i[ok], j[ok], total - i[ok] - j[ok]], axis=1) * step
        vals = x @ mu[:3] - lam * np.einsum("ki,ij,kj->k", x, C3, x)
        k = int(np.argmax(vals))
        return vals[k], x[k]

    # coarse 1e-3 grid over the 3-simplex, then a 1e-5 grid around its best point
    i, j = np.meshgrid(np.arange(1001), np.arange(1001), indexing="ij")
    best, best_x = grid_best(i.ravel(), j.ravel(), 1000, 1e-3)
    c = np.round(best_x * 100_000).astype(int)
    off = np.arange(-1000, 1001)
    i, j = np.meshgrid(c[0] + off, c[1] + off, indexing="ij")
    best = max(best, grid_best(i.ravel(), j.ravel(), 100_000, 1e-5)[0])
    found = mu @ w - lam * w @ cov @ w
    assert found >= best - 1e-12
    assert abs(found - best) < 1e-8


def test_nonconvergence_carries_best_iterate():
    mu, cov = random_instance(3, n=30)
    with pytest.raises(MeanVarianceError) as exc:
        solve_mean_variance(mu, cov, 1.0, tol=0.0, max_iter=20, accept=0.0)
    assert exc.value.best.shape == (30,)
    assert exc.value.residual > 0


def test_iteration_cap_accepts_contract_tolerance():
    mu, cov = random_instance(3, n=30)
    with pytest.raises(MeanVarianceError) as exc:
        solve_mean_variance(mu, cov, 1.0, tol=0.0, max_iter=20, accept=0.0)
    loose = 2 * exc.value.residual
    w, res, it = solve_mean_variance(mu, cov, 1.0, tol=0.0, max_iter=20, accept=loose)
    assert it == 20 and res == exc.value.residual
    assert np.array_equal(w, exc.value.best)


def test_mean_variance_argument_errors():
    with pytest.raises(ValueError):
        solve_mean_variance(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0)
    with pytest.raises(ValueError):
        solve_mean_variance(np.zeros(2), np.eye(2), 0.0)


def test_strategy_spec_validation():
    assert [s.kind for s in StrategySpec.parse_list("equal,network,mv,gat")] == \
        ["equal", "network_index", "mean_variance", "gat"]
    assert StrategySpec.parse_list("mv", 2.5)[0].lambda_risk == 2.5
    with pytest.raises(ValueError):
        StrategySpec("mean_variance")
    with pytest.raises(ValueError):
        StrategySpec("equal", lambda_risk=1.0)
    with pytest.raises(ValueError):
        StrategySpec("network_index", checkpoint="x")
    with pytest.raises(ValueError):
        StrategySpec("momentum")


def test_gat_weights_deterministic_and_valid(tmp_path):
    snap = snapshot(6, T=8, seed=2)
    g = tmfg_from_weights(np.full((6, 6), 0.5))
    params = init_params(8, GatConfig(heads=2, out_dim=3, hidden=5), 4)
    path = tmp_path / "m.gat"
    save_checkpoint(params, path)
    a = gat_weights(load_checkpoint(path), snap, FilteredGraph(snap.firms, g.edges))
    b = gat_weights(load_checkpoint(path), snap, FilteredGraph(snap.firms, g.edges))
    assert np.array_equal(a.weights, b.weights)
    assert np.all((a.weights >= 0) & (a.weights <= 1)) and abs(a.weights.sum() - 1) <= 1e-9


def test_gat_zero_scores_flag_propagates():
    snap = snapshot(5, T=8, seed=3)
    params = init_params(8, GatConfig(heads=1, out_dim=2, hidden=3), 0)
    params.tensors["W2"][:] = 0.0
    params.tensors["b2"][:] = -1.0
    g = FilteredGraph.from_edges(5, [(0, k) for k in range(1, 5)], firms=snap.firms)
    w = gat_weights(params, snap, g)
    assert "degenerate_scores" in w.flags
    np.testing.assert_allclose(w.weights, 0.2)


def test_gat_shape_mismatch():
    snap = snapshot(5, T=8)
    params = init_params(6, GatConfig(heads=1, out_dim=2, hidden=3), 0)
    g = FilteredGraph.from_edges(5, [(0, k) for k in range(1, 5)], firms=snap.firms)
    with pytest.raises(ValueError, match="T=6"):
        gat_weights(params, snap, g)


def test_weights_csv(tmp_path):
    snap = snapshot(3)
    write_weights_csv([("equal", equal_weight(snap))], tmp_path / "w.csv")
    df = pd.read_csv(tmp_path / "w.csv")
    assert list(df.columns) == ["as_of", "firm_id", "weight", "strategy"]
    assert df["weight"].sum() == pytest.approx(1.0)
    assert set(df["as_of"]) == {"2021-04-01"}
