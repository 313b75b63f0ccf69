import numpy as np
import pytest

from keceni_analysis.analysis.features import get_feature_map
from keceni_analysis.analysis.nuisance import (
    CovariateDistribution,
    LogisticPropensity,
    NuisanceBundle,
    ParametricOutcome,
    support_hops,
)
from keceni_analysis.core.graph import NeighborhoodIndex, build_graph
from keceni_analysis.core.models import Dataset


@pytest.fixture
def path_graph():
    """0-1-2-3-4"""
    return build_graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def star_graph():
    """中心 0，叶子 1..4"""
    return build_graph(5, [(0, k) for k in range(1, 5)])


@pytest.fixture
def binary_world():
    """
    6 节点：路径 0-1-2-3-4 加孤立节点 5，二元协变量 (4 种不同行)
    观测摘要 (T_i, Avg(T_{N_i \\ i} - 0.5))：
    0:(1,-.5) 1:(0,.5) 2:(1,0) 3:(1,0) 4:(0,.5) 5:(1,0)
    """
    g = build_graph(6, [(0, 1), (1, 2), (2, 3), (3, 4)])
    x = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0, 0], [1, 1]], dtype=float)
    t = np.array([1, 0, 1, 1, 0, 1])
    y = np.array([1.0, 0.0, 2.0, 1.5, -0.5, 0.7])
    return Dataset(graph=g, y=y, t=t, x=x)


@pytest.fixture
def make_bundle():
    """
    手工设定系数的 nuisance 组合 (linear 结果 + logistic 倾向)
    系数省略时：结果回归只有截距 outcome_const，倾向恒为 0.5
    """

    def factory(ds, outcome_beta=None, propensity_beta=None, outcome_const=0.0,
                outcome_map="nodewise-outcome", propensity_map="nodewise-propensity"):
        om = get_feature_map(outcome_map)
        pm = get_feature_map(propensity_map)
        if outcome_beta is None:
            outcome_beta = np.zeros(om.width(ds.p))
            outcome_beta[0] = outcome_const
        if propensity_beta is None:
            propensity_beta = np.zeros(pm.width(ds.p))
        outcome = ParametricOutcome(
            om, np.asarray(outcome_beta, dtype=float), "identity",
            train_z=om.node_design(ds), train_y=ds.y.copy(),
        )
        propensity = LogisticPropensity(
            pm, np.asarray(propensity_beta, dtype=float),
            train_z=pm.node_design(ds), train_t=ds.t.astype(float),
        )
        return NuisanceBundle(
            outcome=outcome,
            propensity=propensity,
            covariates=CovariateDistribution(ds.x),
            index=NeighborhoodIndex(ds.graph, support_hops(om, pm)),
        )

    return factory
