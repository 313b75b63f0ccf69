"""
线性高斯世界 (节点级与双稳健实验共用)
X ~ N(0, I_p)
T_i ~ Bernoulli(expit(β_π0 + β_π1·x_i + β_π2·Avg(x_{N_i \\ i})))
Y_i = β_μ0 + β_μ1(t_i - 0.5) + β_μ2·Avg(t_{N_i \\ i} - 0.5) + β_μ3·x_i + β_μ4·Avg(x_{N_i^(2) \\ i}) + N(0, 1)
"""
import logging

import numpy as np
from scipy.special import expit

from keceni_analysis.analysis.features import avg_operator
from keceni_analysis.core.graph import Graph, closed_neighborhood
from keceni_analysis.core.models import Dataset, TreatmentScenario
from keceni_analysis.core.workers import task_rng
from keceni_analysis.data.providers.base import WorldProvider

logger = logging.getLogger(__name__)


class NodewiseWorld(WorldProvider):

    def generate(self, graph: Graph, seed: int) -> Dataset:
        cfg = self.cfg
        n, p = graph.n, cfg.p
        avg1 = avg_operator(graph, 1)
        avg2 = avg_operator(graph, 2)

        x = task_rng(seed, "covariates").standard_normal((n, p))
        logits = cfg.beta_pi0 + x @ np.asarray(cfg.beta_pi1) + (avg1 @ x) @ np.asarray(cfg.beta_pi2)
        t = (task_rng(seed, "treatment").random(n) < expit(logits)).astype(np.int64)

        tc = t - 0.5
        mean = (
            cfg.beta_mu0
            + cfg.beta_mu1 * tc
            + cfg.beta_mu2 * (avg1 @ tc)
            + x @ np.asarray(cfg.beta_mu3)
            + (avg2 @ x) @ np.asarray(cfg.beta_mu4)
        )
        y = mean + task_rng(seed, "outcome").standard_normal(n)
        logger.debug("节点级世界生成: n=%s, 处理比例 %.3f", n, t.mean())
        return Dataset(graph=graph, y=y, t=t, x=x)

    def true_theta(self, graph: Graph, scenario: TreatmentScenario) -> float:
        """协变量均值为 0，协变量项在期望中消失"""
        cfg = self.cfg
        t_star = scenario.local_vector(graph)
        others = np.delete(t_star, np.searchsorted(closed_neighborhood(graph, scenario.target), scenario.target))
        avg = float(np.mean(others - 0.5)) if others.size else 0.0
        return float(cfg.beta_mu0 + cfg.beta_mu1 * (scenario.assignment[scenario.target] - 0.5)
                     + cfg.beta_mu2 * avg)
