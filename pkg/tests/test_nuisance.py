import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from keceni_analysis.analysis.features import get_feature_map
from keceni_analysis.analysis.nuisance import (
    CovariateDistribution,
    KernelRegressor,
    LogisticPropensity,
    fit_bundle,
    fit_irls,
    fit_kernel_regressor,
    fit_least_squares,
    fit_logistic,
    joint_propensity,
    load_model,
    logistic_gradient,
    logistic_loglik,
    sample_covariate_profiles,
    save_model,
)
from keceni_analysis.core.errors import ConvergenceError, KeceniInputError, RankDeficiencyError
from keceni_analysis.core.graph import NeighborhoodIndex, build_graph
from keceni_analysis.core.models import Dataset, SimConfig
from keceni_analysis.data.simulation import simulate_replication


# ---------------------------------------------------------------------------
# 最小二乘 / IRLS
# ---------------------------------------------------------------------------

def test_least_squares_two_points():
    beta = fit_least_squares(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([1.0, 3.0]))
    assert_allclose(beta, [1.0, 2.0], atol=1e-12)


def test_least_squares_noiseless_recovery():
    rng = np.random.default_rng(1)
    z = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    truth = np.array([0.5, -1.0, 2.0, 3.5])
    assert_allclose(fit_least_squares(z, z @ truth), truth, atol=1e-10)


def test_least_squares_constant_target():
    rng = np.random.default_rng(2)
    z = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    beta = fit_least_squares(z, np.full(30, 4.2))
    assert_allclose(beta, [4.2, 0.0, 0.0], atol=1e-10)


def test_least_squares_reports_collinear_columns():
    rng = np.random.default_rng(3)
    a = rng.normal(size=20)
    z = np.column_stack([np.ones(20), a, 2.0 * a])
    with pytest.raises(RankDeficiencyError) as err:
        fit_least_squares(z, rng.normal(size=20), ["const", "a", "a2"])
    assert len(err.value.columns) == 1
    assert err.value.columns[0] in ("a", "a2")


def test_irls_intercept_only_closed_form():
    beta = fit_irls(np.ones((4, 1)), np.array([1.0, 1.0, 1.0, 0.0]))
    assert beta[0] == pytest.approx(np.log(3.0), abs=1e-6)
    assert expit(beta[0]) == pytest.approx(0.75, abs=1e-6)

    balanced = fit_irls(np.ones((2, 1)), np.array([1.0, 0.0]))
    assert balanced[0] == pytest.approx(0.0, abs=1e-10)


def test_irls_gradient_vanishes_at_solution():
    rng = np.random.default_rng(4)
    z = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = (rng.random(200) < expit(z @ [0.2, 1.0, -0.5])).astype(float)
    beta = fit_irls(z, y)
    assert np.max(np.abs(logistic_gradient(z, y, beta, 1e-8))) < 1e-8


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    z = np.column_stack([np.ones(100), rng.normal(size=(100, 2))])
    y = (rng.random(100) < 0.4).astype(float)
    beta = np.array([0.3, -0.2, 0.7])
    h = 1e-6
    numeric = np.array([
        (logistic_loglik(z, y, beta + h * e) - logistic_loglik(z, y, beta - h * e)) / (2 * h)
        for e in np.eye(3)
    ])
    assert_allclose(logistic_gradient(z, y, beta), numeric, rtol=1e-5)


def test_irls_recovers_coefficients():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4000, 3))
    truth = np.array([0.5, 0.5, 0.5])
    y = (rng.random(4000) < expit(z @ truth)).astype(float)
    assert_allclose(fit_irls(z, y), truth, atol=0.15)


def test_irls_input_errors():
    with pytest.raises(KeceniInputError):
        fit_irls(np.ones((3, 1)), np.array([1.0, 1.0, 1.0]))
    with pytest.raises(KeceniInputError):
        fit_irls(np.ones((3, 1)), np.array([0.0, 2.0, 1.0]))


def test_irls_separation_hits_coefficient_cap():
    z = np.array([[1.0, -1.0], [1.0, -2.0], [1.0, 1.0], [1.0, 2.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    with pytest.raises(ConvergenceError):
        fit_irls(z, y, ridge=0.0, beta_cap=5.0)


def test_irls_stops_when_line_search_stalls(monkeypatch):
    import keceni_analysis.analysis.nuisance as nuisance

    monkeypatch.setattr(nuisance, "logistic_loglik",
                        lambda z, y, beta, ridge=0.0: 0.0 if not np.any(beta) else -1.0)
    z = np.column_stack([np.ones(6), np.arange(6.0)])
    y = np.array([0.0, 1.0, 0.0, 1.0, 1.0, 1.0])
    with pytest.raises(ConvergenceError, match="line search") as err:
        fit_irls(z, y)
    expected = np.max(np.abs(logistic_gradient(z, y, np.zeros(2), nuisance.settings.IRLS_RIDGE)))
    assert err.value.gradient_norm == pytest.approx(expected)


# ---------------------------------------------------------------------------
# 核回归
# ---------------------------------------------------------------------------

def test_kernel_regressor_exact_key_small_bandwidth():
    reg = KernelRegressor([[0.0], [1.0], [3.0]], [1.0, 2.0, 5.0], bandwidth=1e-6)
    assert reg.predict([[1.0]])[0] == pytest.approx(2.0)
    assert fit_kernel_regressor([[0.0], [1.0], [3.0]], [1.0, 2.0, 5.0], bandwidth=1e-6).predict([[3.0]])[0] == pytest.approx(5.0)


def test_kernel_regressor_constant_targets():
    reg = KernelRegressor([[0.0], [1.0], [3.0]], [7.0, 7.0, 7.0], bandwidth=2.5)
    assert_allclose(reg.predict([[0.3], [2.0], [10.0]]), 7.0)


def test_kernel_regressor_midpoint_is_simple_mean():
    reg = KernelRegressor([[0.0], [1.0]], [1.0, 3.0], bandwidth=2.0)
    assert reg.predict([[0.5]])[0] == pytest.approx(2.0)


def test_kernel_regressor_nearest_neighbor_fallback():
    reg = KernelRegressor([[0.0], [1.0], [3.0]], [1.0, 2.0, 5.0], bandwidth=0.1)
    assert reg.predict([[10.0]])[0] == pytest.approx(5.0)
    assert reg.fallback_count == 1


def test_kernel_regressor_merges_duplicate_keys():
    reg = KernelRegressor([[0.0], [0.0], [1.0]], [1.0, 3.0, 10.0], bandwidth=0.5)
    assert reg.predict([[0.0]])[0] == pytest.approx(2.0)


def test_kernel_regressor_generic_metric():
    reg = KernelRegressor(["a", "bb", "a"], [1.0, 2.0, 3.0], bandwidth=0.5,
                          metric=lambda u, v: abs(len(u) - len(v)))
    assert reg.predict(["a"])[0] == pytest.approx(2.0)


def test_kernel_regressor_predictions_within_range():
    rng = np.random.default_rng(7)
    keys = rng.normal(size=(60, 2))
    targets = rng.normal(size=60)
    for bw in ("median", "loo", 0.3):
        reg = KernelRegressor(keys, targets, bandwidth=bw)
        assert reg.bandwidth > 0
        pred = reg.predict(rng.normal(size=(40, 2)) * 2)
        assert pred.min() >= targets.min() - 1e-12
        assert pred.max() <= targets.max() + 1e-12


def test_kernel_regressor_rejects_bad_bandwidth():
    with pytest.raises(KeceniInputError):
        KernelRegressor([[0.0]], [1.0], bandwidth=0.0)
    with pytest.raises(KeceniInputError):
        KernelRegressor([[0.0]], [1.0], bandwidth="silverman")


# ---------------------------------------------------------------------------
# 倾向得分
# ---------------------------------------------------------------------------

def _propensity(ds, beta):
    return LogisticPropensity(get_feature_map("nodewise-propensity"), np.asarray(beta, dtype=float))


def test_joint_propensity_two_members():
    g = build_graph(2, [(0, 1)])
    ds = Dataset(graph=g, y=np.zeros(2), t=np.array([1, 0]), x=np.array([[0.3], [-1.2]]))
    pm = _propensity(ds, [0.0, 0.0, 0.0])
    assert joint_propensity(pm, ds, 0, np.array([1, 0])) == pytest.approx(0.25)


def test_joint_propensity_isolated_node():
    g = build_graph(1, [])
    ds = Dataset(graph=g, y=np.zeros(1), t=np.array([1]), x=np.array([[2.0]]))
    pm = _propensity(ds, [0.3, 0.5, 0.0])
    assert joint_propensity(pm, ds, 0, np.array([1])) == pytest.approx(expit(0.3 + 0.5 * 2.0))
    assert joint_propensity(pm, ds, 0, np.array([0])) == pytest.approx(1 - expit(1.3))


def test_joint_propensity_sums_to_one(star_graph):
    rng = np.random.default_rng(8)
    ds = Dataset(graph=star_graph, y=np.zeros(5), t=np.array([1, 0, 1, 0, 1]), x=rng.normal(size=(5, 2)))
    pm = _propensity(ds, [0.2, 0.8, -0.4, 0.3, 0.1])
    total = 0.0
    for assign in itertools.product((0, 1), repeat=5):
        value = joint_propensity(pm, ds, 0, np.array(assign))
        assert 0.0 < value <= 1.0
        total += value
    assert total == pytest.approx(1.0, abs=1e-12)


def test_joint_below_every_node_factor(star_graph):
    rng = np.random.default_rng(9)
    ds = Dataset(graph=star_graph, y=np.zeros(5), t=np.array([1, 0, 1, 0, 1]), x=rng.normal(size=(5, 1)))
    pm = _propensity(ds, [0.1, 1.0, 0.5])
    view = NeighborhoodIndex(ds.graph, 2).view(0)
    t_loc = ds.t[view.nbhd]
    p = pm.node_prob(view, ds.x[view.ball])[0]
    factors = np.where(t_loc == 1, p, 1 - p)
    assert pm.joint(view, t_loc, ds.x[view.ball])[0] <= factors.min()


def test_propensity_clamped():
    g = build_graph(1, [])
    ds = Dataset(graph=g, y=np.zeros(1), t=np.array([1]), x=np.array([[1.0]]))
    pm = _propensity(ds, [50.0, 0.0, 0.0])
    view = NeighborhoodIndex(g, 2).view(0)
    assert pm.node_prob(view, ds.x[view.ball])[0, 0] == pytest.approx(1 - 1e-3)


def test_joint_gradient_matches_finite_differences(star_graph):
    rng = np.random.default_rng(10)
    ds = Dataset(graph=star_graph, y=np.zeros(5), t=np.array([1, 0, 1, 0, 1]), x=rng.normal(size=(5, 1)))
    beta = np.array([0.2, 0.6, -0.3])
    view = NeighborhoodIndex(ds.graph, 2).view(0)
    t_loc, x_loc = ds.t[view.nbhd], ds.x[view.ball]
    analytic = _propensity(ds, beta).joint_gradient(view, t_loc, x_loc)[0]
    h = 1e-6
    numeric = np.array([
        (_propensity(ds, beta + h * e).joint(view, t_loc, x_loc)[0]
         - _propensity(ds, beta - h * e).joint(view, t_loc, x_loc)[0]) / (2 * h)
        for e in np.eye(3)
    ])
    assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------------------
# 协变量分布
# ---------------------------------------------------------------------------

def test_profiles_single_row():
    cd = CovariateDistribution(np.array([[1.5, -2.0]]))
    profiles = sample_covariate_profiles(cd, [0, 3, 7], m=20, seed=1)
    assert profiles.shape == (20, 3, 2)
    assert_allclose(profiles, np.broadcast_to([1.5, -2.0], (20, 3, 2)))


def test_profiles_deterministic():
    cd = CovariateDistribution(np.arange(10, dtype=float)[:, None])
    assert_array_equal(sample_covariate_profiles(cd, [0, 1], 50, seed=3),
                       sample_covariate_profiles(cd, [0, 1], 50, seed=3))


def test_profiles_uniform_rows():
    cd = CovariateDistribution(np.arange(4, dtype=float)[:, None])
    m = 100_000
    draws = sample_covariate_profiles(cd, [0], m, seed=11)[:, 0, 0]
    freq = np.bincount(draws.astype(int), minlength=4) / m
    sigma = np.sqrt(0.25 * 0.75 / m)
    assert np.all(np.abs(freq - 0.25) < 4 * sigma)


def test_exact_profiles_weights():
    cd = CovariateDistribution(np.array([[0.0], [0.0], [1.0]]))
    profiles, weights = cd.exact_profiles(2)
    assert profiles.shape == (4, 2, 1)
    assert weights.sum() == pytest.approx(1.0)
    # 重复行按观测频率加权
    assert weights[0] == pytest.approx(4.0 / 9.0)
    with pytest.raises(KeceniInputError):
        cd.exact_profiles(20, cap=100)


# ---------------------------------------------------------------------------
# 拟合入口与持久化
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def nodewise_data():
    return simulate_replication(SimConfig(n=600, seed=3), 0)["dataset"]


def test_fit_bundle_linear_recovers_direct_effect(nodewise_data):
    bundle, ds = fit_bundle(nodewise_data)
    cols = bundle.outcome.feature_map.columns(ds.covariate_names)
    beta = dict(zip(cols, bundle.outcome.beta))
    assert beta["t_ego"] == pytest.approx(2.0, abs=0.4)
    assert bundle.hops == 2
    assert bundle.propensity.parametric


def test_fit_bundle_rejects_swapped_maps(nodewise_data):
    with pytest.raises(KeceniInputError):
        fit_bundle(nodewise_data, outcome_map="nodewise-propensity", propensity_map="nodewise-outcome")


def test_fit_bundle_standardize(nodewise_data):
    bundle, ds = fit_bundle(nodewise_data, standardize=True)
    assert_allclose(ds.x.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(ds.x.std(axis=0), 1.0, atol=1e-12)
    assert bundle.standardize is not None


def test_save_load_parametric_models(tmp_path, nodewise_data):
    bundle, ds = fit_bundle(nodewise_data)
    view = bundle.index.view(5)
    t_loc, x_loc = ds.t[view.nbhd], ds.x[view.ball]
    save_model(bundle.outcome, tmp_path / "outcome.json")
    save_model(bundle.propensity, tmp_path / "propensity.json")
    outcome = load_model(tmp_path / "outcome.json")
    propensity = load_model(tmp_path / "propensity.json")
    assert_allclose(outcome.predict(view, t_loc, x_loc), bundle.outcome.predict(view, t_loc, x_loc))
    assert_allclose(propensity.joint(view, t_loc, x_loc), bundle.propensity.joint(view, t_loc, x_loc))


def test_save_load_kernel_model(tmp_path, nodewise_data):
    bundle, ds = fit_bundle(nodewise_data, outcome_model="kernel", propensity_model="kernel")
    view = bundle.index.view(7)
    t_loc, x_loc = ds.t[view.nbhd], ds.x[view.ball]
    save_model(bundle.outcome, tmp_path / "outcome.json")
    assert (tmp_path / "outcome.table.csv").exists()
    outcome = load_model(tmp_path / "outcome.json")
    assert_allclose(outcome.predict(view, t_loc, x_loc), bundle.outcome.predict(view, t_loc, x_loc))


def test_fit_logistic_propensity_matches_irls(nodewise_data):
    fm = get_feature_map("nodewise-propensity")
    model = fit_logistic(nodewise_data, fm)
    assert isinstance(model, LogisticPropensity)
    z = fm.node_design(nodewise_data)
    assert_allclose(model.beta, fit_irls(z, nodewise_data.t.astype(float)))
