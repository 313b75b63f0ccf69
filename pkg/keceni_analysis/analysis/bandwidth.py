"""
留邻域交叉验证选择核带宽 λ
节点 i 的目标场景为其观测配置 (i, T_{N_i})，估计时排除 N_i^{(2)}
目标函数 (1/n) Σ (ξ̂_i - θ̂_i^{(-N_i^{(2)})})²，只在核质量非零的节点上平均
干扰模型在全部数据上只拟合一次
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from keceni_analysis.analysis.dissimilarity import DissimilarityMetric
from keceni_analysis.analysis.estimator import KeceniEstimator, Kernel
from keceni_analysis.analysis.nuisance import NuisanceBundle
from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import KeceniInputError, KeceniNumericalError
from keceni_analysis.core.graph import k_hop
from keceni_analysis.core.models import CVResult, Dataset
from keceni_analysis.core.workers import parallel_map

logger = logging.getLogger(__name__)


def pooled_deltas(estimator: KeceniEstimator, metric: DissimilarityMetric) -> np.ndarray:
    """各节点观测配置两两之间的 Δ，展平"""
    return metric.pairwise(estimator.summaries(metric)).reshape(-1)


def default_grid(deltas: np.ndarray, size: Optional[int] = None, quantile: float = 0.05) -> np.ndarray:
    """正 Δ 的 5% 分位数到最大 Δ 之间的等比网格"""
    size = settings.CV_GRID_SIZE if size is None else int(size)
    d = np.asarray(deltas, dtype=float).reshape(-1)
    d = d[np.isfinite(d) & (d > 0)]
    if d.size == 0:
        raise KeceniInputError("all dissimilarities are zero; supply a bandwidth grid explicitly")
    lo, hi = float(np.quantile(d, quantile)), float(d.max())
    if size <= 1 or lo >= hi:
        return np.array([hi])
    return np.geomspace(lo, hi, size)


def _leave_out_row(i: int, summaries: np.ndarray, xi: np.ndarray, metric: DissimilarityMetric,
                   kernels: Sequence[Kernel], graph, exclude_hops: int) -> np.ndarray:
    deltas = metric.distances(summaries, summaries[i])
    excluded = k_hop(graph, i, exclude_hops)
    out = np.full(len(kernels), np.nan)
    for col, kernel in enumerate(kernels):
        w = kernel(deltas)
        w[excluded] = 0.0
        den = w.sum()
        if den > 0:
            out[col] = float(w @ xi / den)
    return out


def cv_select(
    ds: Dataset,
    nb: NuisanceBundle,
    metric: DissimilarityMetric,
    kernel_shape: str = "triangular",
    grid: Optional[Sequence[float]] = None,
    m: Optional[int] = None,
    seed: int = 0,
    estimator: Optional[KeceniEstimator] = None,
    exclude_hops: int = 2,
    threads: Optional[int] = None,
) -> CVResult:
    """
    在网格上选 λ

    Args:
        estimator: 已有的 KeceniEstimator (复用其伪结果缓存)；省略时按 (m, seed) 新建
        grid: 候选 λ；省略时用 default_grid
    Returns:
        CVResult，chosen 为 MSE 最小的 λ，并列时取最小 λ
    """
    estimator = estimator or KeceniEstimator(ds, nb, mc_draws=m, seed=seed, threads=threads)
    if grid is None:
        grid = default_grid(pooled_deltas(estimator, metric))
    grid = np.sort(np.asarray(grid, dtype=float).reshape(-1))
    if grid.size == 0:
        raise KeceniInputError("bandwidth grid is empty")
    if not np.all(grid > 0):
        raise KeceniInputError("bandwidth grid values must be positive")

    kernels = [Kernel(lam, kernel_shape) for lam in grid]
    summaries = estimator.summaries(metric)
    xi = estimator.xi
    rows = parallel_map(
        lambda i: _leave_out_row(i, summaries, xi, metric, kernels, ds.graph, exclude_hops),
        range(ds.n),
        threads if threads is not None else estimator.threads,
    )
    leave_out = np.vstack(rows) if rows else np.empty((0, grid.size))

    used = ~np.isnan(leave_out)
    n_used = used.sum(axis=0)
    mse = np.full(grid.size, np.inf)
    for col in range(grid.size):
        if n_used[col]:
            resid = xi[used[:, col]] - leave_out[used[:, col], col]
            mse[col] = float(np.sum(resid ** 2)) / int(n_used[col])
    if not np.isfinite(mse).any():
        raise KeceniNumericalError(f"grid too narrow: no node has kernel mass at any λ <= {grid.max():.4g}")

    best = mse.min()
    ties = np.isclose(mse, best, rtol=1e-9, atol=1e-15)
    chosen = float(grid[np.flatnonzero(ties)[0]])
    flags = []
    if np.isinf(mse).any():
        flags.append("grid_too_narrow_partial")
    logger.info("交叉验证完成: λ=%.4g, MSE=%.4g (%s 个候选)", chosen, best, grid.size)
    return CVResult(
        grid=grid.tolist(),
        mse=mse.tolist(),
        n_used=n_used.astype(int).tolist(),
        n_skipped=(ds.n - n_used).astype(int).tolist(),
        chosen=chosen,
        xi=xi.copy(),
        leave_out=leave_out,
        quality_flags=flags,
    )
