import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError
from scipy import stats

from keceni_analysis.analysis.dissimilarity import DissimilarityMetric
from keceni_analysis.analysis.estimator import KeceniEstimator, Kernel
from keceni_analysis.analysis.scenarios import (
    aggregate_over_nodes,
    all_treated,
    assign_degree_bins,
    average_effects,
    balanced_de_pair,
    compare_groups,
    de_pair,
    none_treated,
    scenario_builders,
    spe_pair,
)
from keceni_analysis.core.errors import KeceniInputError, NoComparableUnitsError, ScenarioError
from keceni_analysis.core.models import TreatmentScenario
from keceni_analysis.data.loader import load_scenario, write_scenario

OUTCOME_BETA = [0.3, 1.0, 0.5, 0.8, -0.6, 0.4, 0.2]
PROPENSITY_BETA = [0.1, 0.7, -0.5, 0.3, 0.2]


@pytest.fixture
def estimator(binary_world, make_bundle):
    return KeceniEstimator(binary_world, make_bundle(binary_world, OUTCOME_BETA, PROPENSITY_BETA), mc_draws=30)


# ---------------------------------------------------------------------------
# 场景构造
# ---------------------------------------------------------------------------

def test_all_and_none_treated(path_graph):
    assert all_treated(path_graph, 2).assignment == {1: 1, 2: 1, 3: 1}
    assert none_treated(path_graph, 0).assignment == {0: 0, 1: 0}


def test_de_pair_differs_only_at_target(binary_world):
    treated, control = de_pair(binary_world, 2)
    assert treated.assignment[2] == 1 and control.assignment[2] == 0
    for j in (1, 3):
        assert treated.assignment[j] == control.assignment[j] == binary_world.t[j]


def test_spe_pair(path_graph):
    treated, control = spe_pair(path_graph, 2, 0)
    assert treated.assignment == {1: 1, 2: 0, 3: 1}
    assert control.assignment == {1: 0, 2: 0, 3: 0}
    with pytest.raises(KeceniInputError):
        spe_pair(path_graph, 2, 2)


def test_balanced_de_pair(star_graph):
    treated, control = balanced_de_pair(star_graph, 0)
    assert treated.assignment == {0: 1, 1: 1, 2: 1, 3: 0, 4: 0}
    assert control.assignment == {0: 0, 1: 1, 2: 1, 3: 0, 4: 0}


def test_scenario_builders_cover_all_kinds(binary_world):
    built = scenario_builders(binary_world, 3)
    assert set(built) == {"all_treated", "none_treated", "de", "spe0", "spe1", "spe_observed", "balanced_de"}
    treated, control = built["spe_observed"]
    assert treated.assignment[3] == control.assignment[3] == binary_world.t[3]


def test_scenario_validation(path_graph):
    with pytest.raises(ScenarioError):
        TreatmentScenario(target=1, assignment={0: 1, 1: 1}).validate_on(path_graph)
    with pytest.raises(ScenarioError):
        TreatmentScenario(target=1, assignment={0: 1, 1: 1, 2: 1, 4: 0}).validate_on(path_graph)
    with pytest.raises(ScenarioError):
        TreatmentScenario(target=7, assignment={7: 1}).validate_on(path_graph)
    with pytest.raises(ValidationError):
        TreatmentScenario(target=1, assignment={0: 1, 1: 2, 2: 1})


def test_isolated_spillover_is_zero(estimator):
    metric = DissimilarityMetric("summary-l1")
    treated, control = spe_pair(estimator.ds.graph, 5, 0)
    assert treated.assignment == control.assignment
    kernel = Kernel(1.5)
    effect = estimator.estimate(treated, metric, kernel).theta - estimator.estimate(control, metric, kernel).theta
    assert effect == 0.0


def test_scenario_file_round_trip(tmp_path, binary_world):
    ids = [f"n{k}" for k in range(binary_world.n)]
    sc = de_pair(binary_world, 2)[0]
    write_scenario(sc, tmp_path / "sc.json", ids)
    loaded = load_scenario(tmp_path / "sc.json", binary_world.graph, ids)
    assert loaded.target == sc.target
    assert loaded.assignment == sc.assignment
    assert loaded.label == sc.label


# ---------------------------------------------------------------------------
# 汇总
# ---------------------------------------------------------------------------

def test_aggregate_single_group():
    out = aggregate_over_nodes([1.0, 2.0, 6.0])
    assert out["group"].tolist() == ["all"]
    assert out["mean"].iloc[0] == pytest.approx(3.0)
    assert out["count"].iloc[0] == 3


def test_aggregate_degree_bins():
    degree = np.array([0, 1, 3, 5, 9, 10])
    out = aggregate_over_nodes([1, 2, 4, 6, 8, 10], degree, grouping="degree-bins")
    assert out["group"].tolist() == ["0", "1-4", "5-8", ">=9"]
    assert out["count"].tolist() == [1, 2, 1, 2]
    assert_allclose(out["mean"], [1.0, 3.0, 6.0, 9.0])


def test_aggregate_bin_sizes_and_errors():
    degree = np.array([0, 0, 2, 4, 4, 7, 12, 30])
    labels = assign_degree_bins(degree)
    assert list(labels) == ["0", "0", "1-4", "1-4", "1-4", "5-8", ">=9", ">=9"]
    custom = aggregate_over_nodes(np.ones(8), degree, grouping="degree-bins", bins=((0, 2), (3, None)))
    assert custom["count"].tolist() == [3, 5]
    with pytest.raises(KeceniInputError):
        aggregate_over_nodes([1.0], grouping="degree-bins")
    with pytest.raises(KeceniInputError):
        aggregate_over_nodes([1.0], grouping="by-color")


def test_compare_groups_welch():
    degree = np.array([0, 0, 0, 2, 2, 3])
    values = np.array([1.0, 1.5, 0.5, 3.0, 2.0, 4.0])
    out = compare_groups(values, degree)
    assert len(out) == 1
    row = out.iloc[0]
    ref = stats.ttest_ind(values[:3], values[3:], equal_var=False)
    assert (row["group_a"], row["group_b"]) == ("0", "1-4")
    assert row["statistic"] == pytest.approx(ref.statistic)
    assert row["p_value"] == pytest.approx(ref.pvalue)
    assert not row["adjusted"]


# ---------------------------------------------------------------------------
# 多目标平均效应
# ---------------------------------------------------------------------------

def test_average_effects_matches_per_target(estimator):
    metric = DissimilarityMetric("summary-l1")
    kernel = Kernel(2.5)
    g = estimator.ds.graph
    targets = [0, 1, 2, 3, 4]
    result = average_effects(estimator, targets, lambda i: (all_treated(g, i), none_treated(g, i)), metric, kernel)
    per = result["per_target"]
    for row in per.itertuples():
        assert row.theta_treated == pytest.approx(estimator.estimate(all_treated(g, row.target), metric, kernel).theta)
        assert row.theta_control == pytest.approx(estimator.estimate(none_treated(g, row.target), metric, kernel).theta)
    assert result["effect"] == pytest.approx(per["effect"].mean())
    assert result["mean_treated"] - result["mean_control"] == pytest.approx(result["effect"])
    assert result["skipped"] == 0


def test_average_effects_variance(estimator):
    metric = DissimilarityMetric("summary-l1")
    g = estimator.ds.graph
    result = average_effects(estimator, [1, 2, 3], lambda i: (all_treated(g, i), none_treated(g, i)),
                             metric, Kernel(2.5), variance="simple", radius=1)
    report = result["variance"]["effect"]
    assert report.sigma2 > 0
    assert report.ci[0] < result["effect"] < report.ci[1]
    assert set(result["variance"]) == {"mean_treated", "mean_control", "effect"}


def test_average_effects_skip_empty(estimator):
    metric = DissimilarityMetric("summary-l1")
    g = estimator.ds.graph
    builder = lambda i: spe_pair(g, i, 1)  # noqa: E731
    kernel = Kernel(0.25, "box")
    with pytest.raises(NoComparableUnitsError):
        average_effects(estimator, [2, 5], builder, metric, kernel)
    result = average_effects(estimator, [2, 5], builder, metric, kernel, skip_empty=True)
    assert result["skipped"] == 1
    assert result["per_target"]["target"].tolist() == [5]
    assert result["effect"] == 0.0
