"""
二元结果世界 (ATE 实验)
X ∈ {0,1}²，各分量独立 Bernoulli(0.5)；w(x) = (x1 - 0.5)(x2 - 0.5)
T_i ~ Bernoulli(expit(β_π·Avg(w(x_{N_i \\ i}))))
Y_i ~ Bernoulli(expit(β_μ1(t_i - 0.5) + β_μ2·Avg(w(x_{N_i \\ i}))))
"""
import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy import stats
from scipy.special import expit

from keceni_analysis.analysis.features import avg_operator, interaction_w
from keceni_analysis.core.graph import Graph
from keceni_analysis.core.models import Dataset, TreatmentScenario
from keceni_analysis.core.workers import task_rng
from keceni_analysis.data.providers.base import WorldProvider

logger = logging.getLogger(__name__)


class AteWorld(WorldProvider):

    def generate(self, graph: Graph, seed: int) -> Dataset:
        cfg = self.cfg
        n = graph.n
        avg1 = avg_operator(graph, 1)
        x = (task_rng(seed, "covariates").random((n, 2)) < 0.5).astype(float)
        avg_w = avg1 @ interaction_w(x)
        t = (task_rng(seed, "treatment").random(n) < expit(cfg.ate_beta_pi * avg_w)).astype(np.int64)
        prob = expit(cfg.ate_beta_mu1 * (t - 0.5) + cfg.ate_beta_mu2 * avg_w)
        y = (task_rng(seed, "outcome").random(n) < prob).astype(float)
        logger.debug("ATE 世界生成: n=%s, 处理比例 %.3f, 结果均值 %.3f", n, t.mean(), y.mean())
        return Dataset(graph=graph, y=y, t=t, x=x)

    def node_theta(self, degree: int, t_ego: int) -> float:
        return _exact_theta(int(degree), int(t_ego), self.cfg.ate_beta_mu1, self.cfg.ate_beta_mu2)

    def true_theta(self, graph: Graph, scenario: TreatmentScenario) -> float:
        # 结果只依赖自身处理，邻居处理不影响真值
        scenario.validate_on(graph)
        return self.node_theta(graph.degree[scenario.target], scenario.assignment[scenario.target])

    def population_means(self, graph: Graph) -> Tuple[float, float, float]:
        """所有节点 θ_i(全处理) 与 θ_i(全不处理) 的平均及其差"""
        treated = float(np.mean([self.node_theta(d, 1) for d in graph.degree]))
        control = float(np.mean([self.node_theta(d, 0) for d in graph.degree]))
        return treated, control, treated - control


@lru_cache(maxsize=4096)
def _exact_theta(degree: int, t_ego: int, beta_mu1: float, beta_mu2: float) -> float:
    """Avg(w) = 0.25(2B - k)/k，B ~ Binomial(k, 0.5)；孤立节点 Avg = 0"""
    if degree == 0:
        return float(expit(beta_mu1 * (t_ego - 0.5)))
    b = np.arange(degree + 1)
    avg = 0.25 * (2 * b - degree) / degree
    pmf = stats.binom.pmf(b, degree, 0.5)
    return float(pmf @ expit(beta_mu1 * (t_ego - 0.5) + beta_mu2 * avg))
