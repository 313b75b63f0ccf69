"""
核平滑的双稳健估计
1. 每个节点构造伪结果 ξ̂_i = (Y_i - μ̂_i)/π̂_i · ϖ̂_i + m̂_i
2. 以核权重 κ_λ(Δ_i) 对 ξ̂ 加权平均得到 θ̂_{i*}(t*)
ξ̂ 与目标无关，按 (数据集, nuisance, 积分次数, 种子) 缓存后在不同场景与带宽之间复用
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from keceni_analysis.analysis.dissimilarity import DissimilarityMetric
from keceni_analysis.analysis.features import FeatureMap, get_feature_map
from keceni_analysis.analysis.nuisance import NuisanceBundle, fit_irls, fit_least_squares
from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import KeceniInputError, NoComparableUnitsError
from keceni_analysis.core.models import Dataset, Estimate, PseudoOutcome, TreatmentScenario
from keceni_analysis.core.workers import parallel_map, task_rng

logger = logging.getLogger(__name__)


class Kernel:
    """κ_λ(Δ) = κ(Δ/λ)，κ 支撑于 [0, 1] 且 κ(0) = 1"""

    SHAPES = ("triangular", "box")

    def __init__(self, bandwidth: float, shape: str = "triangular"):
        if shape not in self.SHAPES:
            raise KeceniInputError(f"unknown kernel shape '{shape}'")
        if not bandwidth > 0:
            raise KeceniInputError("bandwidth must be positive")
        self.bandwidth = float(bandwidth)
        self.shape = shape

    def __repr__(self) -> str:
        return f"Kernel({self.shape}, λ={self.bandwidth:.4g})"

    def __call__(self, deltas: np.ndarray) -> np.ndarray:
        u = np.asarray(deltas, dtype=float) / self.bandwidth
        if self.shape == "box":
            return (u <= 1.0).astype(float)
        return np.clip(1.0 - u, 0.0, None)


@dataclass
class PseudoOutcomeTable:
    """所有节点的伪结果分量"""
    xi: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    m: np.ndarray
    varpi: np.ndarray
    draws: np.ndarray

    def record(self, i: int) -> PseudoOutcome:
        return PseudoOutcome(
            node=i, xi=float(self.xi[i]), y=float(self.y[i]), mu=float(self.mu[i]),
            pi=float(self.pi[i]), m=float(self.m[i]), varpi=float(self.varpi[i]),
            mc_draws=int(self.draws[i]),
        )


def _node_components(ds: Dataset, nb: NuisanceBundle, i: int, m: int, seed: int,
                     integration: str) -> Tuple[float, float, float, float, int]:
    view = nb.index.view(i)
    t_loc = ds.t[view.nbhd]
    x_obs = ds.x[view.ball]
    mu_i = float(nb.outcome.predict(view, t_loc, x_obs)[0])
    pi_i = float(nb.propensity.joint(view, t_loc, x_obs)[0])
    profiles, weights = nb.covariates.integration(view.size, m, task_rng(seed, "mc", i), mode=integration)
    m_i = float(weights @ nb.outcome.predict(view, t_loc, profiles))
    varpi_i = float(weights @ nb.propensity.joint(view, t_loc, profiles))
    return mu_i, pi_i, m_i, varpi_i, len(weights)


def pseudo_outcome(ds: Dataset, nb: NuisanceBundle, i: int, m: Optional[int] = None, seed: int = 0,
                   integration: str = "auto") -> PseudoOutcome:
    m = settings.MC_DRAWS if m is None else m
    if m < 1:
        raise KeceniInputError("draw count must be at least 1")
    ds.require_outcomes([i])
    mu_i, pi_i, m_i, varpi_i, draws = _node_components(ds, nb, i, m, seed, integration)
    y = float(ds.y[i])
    xi = (y - mu_i) / pi_i * varpi_i + m_i
    return PseudoOutcome(node=i, xi=xi, y=y, mu=mu_i, pi=pi_i, m=m_i, varpi=varpi_i, mc_draws=draws)


class KeceniEstimator:
    """
    伪结果缓存 + 核平滑估计

    Args:
        ds: 与 nuisance 拟合时相同的数据集
        bundle: fit_bundle 的结果
        mc_draws: 每个节点积分的 Monte Carlo 次数
        integration: auto | exact | mc
    """

    def __init__(self, ds: Dataset, bundle: NuisanceBundle, mc_draws: Optional[int] = None, seed: int = 0,
                 integration: str = "auto", threads: Optional[int] = None):
        if bundle.graph is not ds.graph and bundle.graph != ds.graph:
            raise KeceniInputError("nuisance bundle was fitted on a different graph")
        ds.require_outcomes()
        self.ds = ds
        self.bundle = bundle
        self.mc_draws = settings.MC_DRAWS if mc_draws is None else int(mc_draws)
        if self.mc_draws < 1:
            raise KeceniInputError("draw count must be at least 1")
        self.seed = int(seed)
        self.integration = integration
        self.threads = threads
        self._table: Optional[PseudoOutcomeTable] = None
        self._summaries = {}

    @property
    def table(self) -> PseudoOutcomeTable:
        if self._table is None:
            self._table = self._compute_table()
        return self._table

    @property
    def xi(self) -> np.ndarray:
        return self.table.xi

    def _compute_table(self) -> PseudoOutcomeTable:
        ds = self.ds
        rows = parallel_map(
            lambda i: _node_components(ds, self.bundle, i, self.mc_draws, self.seed, self.integration),
            range(ds.n),
            self.threads,
        )
        mu, pi, m, varpi, draws = (np.array(col) for col in zip(*rows)) if rows else [np.empty(0)] * 5
        xi = (ds.y - mu) / pi * varpi + m
        logger.info("伪结果计算完成: n=%s, 积分=%s, 平均次数=%.0f", ds.n, self.integration,
                    float(np.mean(draws)) if len(draws) else 0.0)
        return PseudoOutcomeTable(xi=xi, y=ds.y.copy(), mu=mu, pi=pi, m=m, varpi=varpi,
                                  draws=np.asarray(draws, dtype=int))

    def pseudo_outcome(self, i: int) -> PseudoOutcome:
        return self.table.record(i)

    def summaries(self, metric: DissimilarityMetric) -> np.ndarray:
        key = (metric.kind, id(metric.summary), metric.empty_policy)
        if key not in self._summaries:
            self._summaries[key] = metric.node_summaries(self.ds)
        return self._summaries[key]

    def deltas(self, sc: TreatmentScenario, metric: DissimilarityMetric) -> np.ndarray:
        return metric.distances(self.summaries(metric), metric.scenario_summary(self.ds.graph, sc))

    def estimate(self, sc: TreatmentScenario, metric: DissimilarityMetric, kernel: Kernel,
                 exclude: Optional[Iterable[int]] = None) -> Estimate:
        sc.validate_on(self.ds.graph)
        deltas = self.deltas(sc, metric)
        return self.estimate_from_deltas(deltas, kernel, sc, metric, exclude)

    def estimate_from_deltas(self, deltas: np.ndarray, kernel: Kernel, sc: TreatmentScenario,
                             metric: DissimilarityMetric, exclude: Optional[Iterable[int]] = None) -> Estimate:
        xi = self.xi
        weights = kernel(deltas)
        if exclude is not None:
            excl = np.fromiter(exclude, dtype=np.int64)
            weights[excl] = 0.0
        d_hat = float(np.sum(weights))
        if d_hat <= 0:
            mask = np.ones(len(deltas), dtype=bool)
            if exclude is not None:
                mask[excl] = False
            min_delta = float(np.min(deltas[mask])) if mask.any() else float("inf")
            raise NoComparableUnitsError(kernel.bandwidth, min_delta)
        theta = float(weights @ xi / d_hat)
        return Estimate(
            theta=theta,
            d_hat=d_hat,
            bandwidth=kernel.bandwidth,
            metric=metric.name,
            kernel=kernel.shape,
            seed=self.seed,
            target=sc.target,
            scenario=sc.label,
            n_effective=d_hat ** 2 / float(np.sum(weights ** 2)),
            nodes=np.arange(len(xi)),
            deltas=deltas,
            weights=weights,
            xi=xi,
        )

    def g_computation(self, sc: TreatmentScenario) -> float:
        return g_computation(self.bundle, sc, self.mc_draws, self.seed, self.integration)


def keceni_estimate(ds: Dataset, nb: NuisanceBundle, metric: DissimilarityMetric, kernel: Kernel,
                    sc: TreatmentScenario, exclude: Optional[Iterable[int]] = None,
                    m: Optional[int] = None, seed: int = 0) -> Estimate:
    return KeceniEstimator(ds, nb, mc_draws=m, seed=seed).estimate(sc, metric, kernel, exclude)


def g_computation(nb: NuisanceBundle, sc: TreatmentScenario, m: Optional[int] = None, seed: int = 0,
                  integration: str = "auto") -> float:
    """∫ μ̂(t*, x) dP̂ 在目标节点支撑集上的积分"""
    m = settings.MC_DRAWS if m is None else m
    if m < 1:
        raise KeceniInputError("draw count must be at least 1")
    g = nb.graph
    view = nb.index.view(sc.target)
    t_star = sc.local_vector(g)
    # 与伪结果使用不同的子流，避免与目标节点自身的积分共用抽样
    rng = task_rng(seed, "mc", g.n + sc.target)
    profiles, weights = nb.covariates.integration(view.size, m, rng, mode=integration)
    return float(weights @ nb.outcome.predict(view, t_star, profiles))


def aipw_sutva(
    ds: Dataset,
    outcome_fm: Union[str, FeatureMap] = "nodewise-outcome",
    propensity_fm: Union[str, FeatureMap] = "nodewise-propensity",
    mu_hat: Optional[np.ndarray] = None,
    e_hat: Optional[np.ndarray] = None,
    eps: Optional[float] = None,
) -> Tuple[float, float, float]:
    """
    忽略网络的经典 AIPW：θ̂(t) = mean[1{T=t}(Y - μ̂_t(X))/P̂(T=t|X) + μ̂_t(X)]
    mu_hat (n, 2) 的列分别为 μ̂_0, μ̂_1；e_hat 为 P̂(T=1|X)。省略时按特征映射的协变量变换拟合
    """
    ds.require_outcomes()
    eps = settings.PROPENSITY_EPS if eps is None else eps
    om = get_feature_map(outcome_fm) if isinstance(outcome_fm, str) else outcome_fm
    pm = get_feature_map(propensity_fm) if isinstance(propensity_fm, str) else propensity_fm
    y, t = ds.y, ds.t

    if mu_hat is None:
        z = np.column_stack([np.ones(ds.n), om.g(ds.x)])
        mu_hat = np.empty((ds.n, 2))
        for arm in (0, 1):
            sel = t == arm
            beta = fit_least_squares(z[sel], y[sel])
            mu_hat[:, arm] = z @ beta
    if e_hat is None:
        z = np.column_stack([np.ones(ds.n), pm.g(ds.x)])
        e_hat = expit(z @ fit_irls(z, t.astype(float)))
    e_hat = np.clip(np.asarray(e_hat, dtype=float), eps, 1.0 - eps)
    mu_hat = np.asarray(mu_hat, dtype=float)

    theta1 = float(np.mean(t * (y - mu_hat[:, 1]) / e_hat + mu_hat[:, 1]))
    theta0 = float(np.mean((1 - t) * (y - mu_hat[:, 0]) / (1.0 - e_hat) + mu_hat[:, 0]))
    logger.info("SUTVA-AIPW: θ(1)=%.4f, θ(0)=%.4f", theta1, theta0)
    return theta1, theta0, theta1 - theta0
