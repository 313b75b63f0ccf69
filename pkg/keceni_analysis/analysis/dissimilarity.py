"""
局部配置之间的差异度 Δ_i
- summary-l1: (T_i, Avg(T_{N_i \\ i} - 0.5)) 的 L1 距离
- wasserstein-treatment: |T_i - t*| + W1(邻居处理的经验分布)
- custom-summary: 用户给定的摘要函数上的 L1 距离
另含一维与多维离散 Wasserstein-1 距离 (ℓ1 地面代价)
"""
from __future__ import annotations

import logging
from typing import Callable, Literal, Optional, Tuple

import numpy as np
import ot
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import KeceniInputError, KeceniNumericalError
from keceni_analysis.core.graph import Graph, closed_neighborhood
from keceni_analysis.core.models import Dataset, TreatmentScenario

logger = logging.getLogger(__name__)

EmptyPolicy = Literal["midpoint", "exclude"]


def w1_real_line(a, b) -> float:
    """实数多重集之间的 W1，分位数函数差的积分"""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise KeceniInputError("Wasserstein distance needs two non-empty multisets")
    return float(wasserstein_distance(a, b))


def w1_discrete(a, b, cap: Optional[int] = None) -> float:
    """
    ℝ^d 多重集之间的 W1 (ℓ1 代价)，均匀边际的运输问题精确求解
    以对偶势的约化代价验证最优性
    """
    cap = settings.TRANSPORT_CAP if cap is None else cap
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a.reshape(len(a), -1) if a.ndim < 2 else a
    b = b.reshape(len(b), -1) if b.ndim < 2 else b
    if len(a) == 0 or len(b) == 0:
        raise KeceniInputError("Wasserstein distance needs two non-empty supports")
    if len(a) > cap or len(b) > cap:
        raise KeceniInputError(f"transport problem size {len(a)}x{len(b)} exceeds the cap {cap}")
    if a.shape[1] != b.shape[1]:
        raise KeceniInputError("supports must live in the same dimension")
    cost = cdist(a, b, metric="cityblock")
    wa = np.full(len(a), 1.0 / len(a))
    wb = np.full(len(b), 1.0 / len(b))
    plan, log = ot.emd(wa, wb, cost, log=True)
    reduced = cost - log["u"][:, None] - log["v"][None, :]
    if reduced.min() < -1e-9 or np.abs(reduced[plan > 1e-14]).max(initial=0.0) > 1e-9:
        raise KeceniNumericalError("transport solution failed the optimality certificate")
    return float(np.sum(plan * cost))


class DissimilarityMetric:
    """
    Δ 的计算器；所有 kind 都先把节点配置压缩为摘要，再与目标摘要比较
    """

    def __init__(self, kind: str = "summary-l1", summary: Optional[Callable[[np.ndarray, int], np.ndarray]] = None,
                 empty_policy: EmptyPolicy = "midpoint"):
        if kind not in ("summary-l1", "wasserstein-treatment", "custom-summary"):
            raise KeceniInputError(f"unknown dissimilarity metric '{kind}'")
        if kind == "custom-summary" and summary is None:
            raise KeceniInputError("custom-summary metric needs a summary function")
        if empty_policy not in ("midpoint", "exclude"):
            raise KeceniInputError(f"unknown empty-neighborhood policy '{empty_policy}'")
        self.kind = kind
        self.summary = summary
        self.empty_policy = empty_policy

    def __repr__(self) -> str:
        return f"DissimilarityMetric({self.kind})"

    @property
    def name(self) -> str:
        return self.kind

    def config_summary(self, t_local: np.ndarray, ego: int) -> Tuple[float, ...]:
        """单个局部配置的摘要 (treatment 向量按闭邻域排列, ego 为自身位置)"""
        t_local = np.asarray(t_local, dtype=float)
        others = np.delete(t_local, ego)
        if self.kind == "custom-summary":
            return tuple(np.asarray(self.summary(t_local, ego), dtype=float).tolist())
        if self.kind == "summary-l1":
            avg = float(np.mean(others - 0.5)) if others.size else 0.0
            return (float(t_local[ego]), avg)
        # 第二个分量：邻居处理均值；孤立节点记为 NaN
        return (float(t_local[ego]), float(np.mean(others)) if others.size else np.nan)

    def node_summaries(self, ds: Dataset, t: Optional[np.ndarray] = None) -> np.ndarray:
        """所有节点观测配置的摘要矩阵 (n, d)"""
        g = ds.graph
        t = ds.t if t is None else np.asarray(t)
        if self.kind == "custom-summary":
            rows = []
            for i in range(g.n):
                nb = closed_neighborhood(g, i)
                rows.append(self.config_summary(t[nb], int(np.searchsorted(nb, i))))
            return np.asarray(rows, dtype=float)
        deg = g.degree
        nsum = np.array([t[a].sum() for a in g.adjacency], dtype=float)
        ego = t.astype(float)
        if self.kind == "summary-l1":
            avg = np.divide(nsum, deg, out=np.zeros(g.n), where=deg > 0) - np.where(deg > 0, 0.5, 0.0)
            return np.column_stack([ego, avg])
        mean = np.divide(nsum, deg, out=np.full(g.n, np.nan), where=deg > 0)
        return np.column_stack([ego, mean])

    def scenario_summary(self, g: Graph, sc: TreatmentScenario) -> Tuple[float, ...]:
        nb = closed_neighborhood(g, sc.target)
        return self.config_summary(sc.local_vector(g), int(np.searchsorted(nb, sc.target)))

    def distances(self, summaries: np.ndarray, target: Tuple[float, ...]) -> np.ndarray:
        """每个节点摘要到目标摘要的 Δ"""
        summaries = np.asarray(summaries, dtype=float)
        target = np.asarray(target, dtype=float)
        if self.kind != "wasserstein-treatment":
            return np.abs(summaries - target[None, :]).sum(axis=1)
        ego = np.abs(summaries[:, 0] - target[0])
        node_empty = np.isnan(summaries[:, 1])
        target_empty = bool(np.isnan(target[1]))
        if target_empty:
            w = np.where(node_empty, 0.0, np.nan)
        else:
            w = np.abs(summaries[:, 1] - target[1])
        # 一侧为空时以 0.5 处的点质量代替空分布
        one_sided = node_empty != target_empty
        if self.empty_policy == "exclude":
            w = np.where(one_sided, np.inf, w)
        else:
            w = np.where(one_sided, 0.5, w)
        return ego + w

    def pairwise(self, summaries: np.ndarray) -> np.ndarray:
        """(n, n) 矩阵，第 i 列为各节点相对于节点 i 观测配置的 Δ"""
        summaries = np.asarray(summaries, dtype=float)
        return np.column_stack([self.distances(summaries, summaries[i]) for i in range(len(summaries))])

    def deltas(self, ds: Dataset, sc: TreatmentScenario) -> np.ndarray:
        return self.distances(self.node_summaries(ds), self.scenario_summary(ds.graph, sc))

    def delta(self, ds: Dataset, i: int, sc: TreatmentScenario, overrides: Optional[np.ndarray] = None) -> float:
        """单节点 Δ_i；overrides 按 N_i 升序替换节点 i 的观测处理"""
        nb = closed_neighborhood(ds.graph, i)
        t_local = ds.t[nb] if overrides is None else np.asarray(overrides)
        if t_local.shape != nb.shape:
            raise KeceniInputError(f"overrides must cover the {nb.size} nodes of N_{i}")
        s = self.config_summary(t_local, int(np.searchsorted(nb, i)))
        return float(self.distances(np.asarray([s]), self.scenario_summary(ds.graph, sc))[0])


def summary_l1_delta(ds: Dataset, i: int, sc: TreatmentScenario, overrides: Optional[np.ndarray] = None) -> float:
    return DissimilarityMetric("summary-l1").delta(ds, i, sc, overrides)


def wasserstein_treatment_delta(ds: Dataset, i: int, sc: TreatmentScenario, overrides: Optional[np.ndarray] = None,
                                empty_policy: EmptyPolicy = "midpoint") -> float:
    """
    |T_i - t*_{i*}| + W1(P̂{T_j}_{j∈N_i\\i}, P̂{t*_j}_{j∈N_{i*}\\i*})
    对二元处理与 w1_real_line 的结果一致
    """
    return DissimilarityMetric("wasserstein-treatment", empty_policy=empty_policy).delta(ds, i, sc, overrides)


def get_metric(name: str, empty_policy: EmptyPolicy = "midpoint") -> DissimilarityMetric:
    return DissimilarityMetric(name, empty_policy=empty_policy)


def cloud_distance(a: Tuple, b: Tuple) -> float:
    """
    (ego 向量, 邻居点云) 键之间的距离：‖ego_a - ego_b‖₁ + W1(点云)
    一侧点云为空时以各坐标取 0.5 的点质量代替
    """
    ego_a, cloud_a = a
    ego_b, cloud_b = b
    d = float(np.abs(np.asarray(ego_a, dtype=float) - np.asarray(ego_b, dtype=float)).sum())
    if not cloud_a and not cloud_b:
        return d
    dim = len(cloud_a[0]) if cloud_a else len(cloud_b[0])
    mid = [(0.5,) * dim]
    return d + w1_discrete(np.asarray(cloud_a or mid), np.asarray(cloud_b or mid))
