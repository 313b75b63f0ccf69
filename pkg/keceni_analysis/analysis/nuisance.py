"""
干扰模型 (nuisance) 拟合与评估
1. 结果回归 μ̂：linear / logistic / kernel
2. 节点级倾向得分 π̂°：logistic / kernel，联合倾向为闭邻域上的乘积
3. 协变量分布 P̂：经验乘积测度，每个位置独立均匀地重抽观测行
"""
from __future__ import annotations

import itertools
import json
import logging
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import linalg
from scipy.spatial.distance import cdist, pdist
from scipy.special import expit

from keceni_analysis.analysis.dissimilarity import cloud_distance
from keceni_analysis.analysis.features import FeatureMap, get_feature_map
from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import (
    ConvergenceError,
    KeceniInputError,
    RankDeficiencyError,
    SingularBreadError,
)
from keceni_analysis.core.graph import LocalView, NeighborhoodIndex
from keceni_analysis.core.models import Dataset

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# 参数化拟合
# ---------------------------------------------------------------------------

def fit_least_squares(z: np.ndarray, y: np.ndarray, columns: Optional[List[str]] = None) -> np.ndarray:
    """普通最小二乘；秩亏时报出共线列而不是退回伪逆"""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    columns = columns or [f"z{k}" for k in range(z.shape[1])]
    _, r, piv = linalg.qr(z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(z.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < z.shape[1]:
        raise RankDeficiencyError([columns[k] for k in sorted(piv[rank:])])
    beta, *_ = linalg.lstsq(z, y)
    return beta


def logistic_loglik(z: np.ndarray, y: np.ndarray, beta: np.ndarray, ridge: float = 0.0) -> float:
    eta = z @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * ridge * beta @ beta)


def logistic_gradient(z: np.ndarray, y: np.ndarray, beta: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    return z.T @ (y - expit(z @ beta)) - ridge * beta


def fit_irls(
    z: np.ndarray,
    y: np.ndarray,
    ridge: Optional[float] = None,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
    beta_cap: Optional[float] = None,
) -> np.ndarray:
    """
    IRLS (Newton) 求解带微小岭惩罚的 Bernoulli 极大似然

    Args:
        z: 设计矩阵 (n, q)
        y: 0/1 目标
    Returns:
        β̂，收敛判据为惩罚梯度的 sup 范数 < tol
    """
    ridge = settings.IRLS_RIDGE if ridge is None else ridge
    max_iter = settings.IRLS_MAX_ITER if max_iter is None else max_iter
    tol = settings.IRLS_TOL if tol is None else tol
    beta_cap = settings.IRLS_BETA_CAP if beta_cap is None else beta_cap

    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise KeceniInputError("logistic targets must be binary")
    if y.min() == y.max():
        raise KeceniInputError("logistic targets need at least one 0 and one 1")

    beta = np.zeros(z.shape[1])
    ll = logistic_loglik(z, y, beta, ridge)
    grad = logistic_gradient(z, y, beta, ridge)
    for it in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            logger.debug("IRLS 收敛: 迭代 %s 次", it)
            return beta
        p = expit(z @ beta)
        hess = (z * (p * (1.0 - p))[:, None]).T @ z + ridge * np.eye(z.shape[1])
        step = linalg.solve(hess, grad, assume_a="pos")
        scale = 1.0
        accepted = False
        while scale > 1e-10:
            cand = beta + scale * step
            cand_ll = logistic_loglik(z, y, cand, ridge)
            if cand_ll >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            raise ConvergenceError(
                f"IRLS line search could not increase the likelihood at iteration {it}",
                gradient_norm=float(np.max(np.abs(grad))),
            )
        beta, ll = cand, cand_ll
        if np.linalg.norm(beta) > beta_cap:
            raise ConvergenceError(
                f"logistic coefficients exceed {beta_cap:g} (complete separation suspected); "
                f"increase the ridge penalty",
                gradient_norm=float(np.max(np.abs(grad))),
            )
        grad = logistic_gradient(z, y, beta, ridge)
    if np.max(np.abs(grad)) < tol:
        return beta
    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations", gradient_norm=float(np.max(np.abs(grad)))
    )


# ---------------------------------------------------------------------------
# 核回归
# ---------------------------------------------------------------------------

def triangular(u: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.asarray(u, dtype=float), 0.0, None)


class KernelRegressor:
    """
    Nadaraya-Watson 回归，三角核
    keys 为特征向量 (metric 为 scipy 距离名) 或任意可哈希键 (metric 为可调用距离)
    重复键在训练时合并为 (目标和, 计数)
    """

    def __init__(
        self,
        keys,
        targets: Sequence[float],
        bandwidth: Union[float, str] = "median",
        metric: Union[str, Callable[[Hashable, Hashable], float]] = "cityblock",
    ):
        targets = np.asarray(targets, dtype=float)
        if len(targets) == 0:
            raise KeceniInputError("kernel regressor needs a non-empty training table")
        self.metric = metric
        self.generic = callable(metric)
        if self.generic:
            index: Dict[Hashable, int] = {}
            inverse = np.array([index.setdefault(k, len(index)) for k in keys], dtype=np.int64)
            self.keys = list(index)
        else:
            arr = np.asarray(keys, dtype=float)
            arr = arr.reshape(len(targets), -1)
            self.keys, inverse = np.unique(arr, axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
        n_keys = len(self.keys)
        self.sums = np.bincount(inverse, weights=targets, minlength=n_keys)
        self.counts = np.bincount(inverse, minlength=n_keys).astype(float)
        self.means = self.sums / self.counts
        self.y_range = (float(targets.min()), float(targets.max()))
        self._train_targets = targets
        self._train_inverse = inverse
        self._cache: Dict[Hashable, float] = {}
        self.fallback_count = 0
        self._warned = False

        if isinstance(bandwidth, str):
            if bandwidth == "median":
                bandwidth = self._median_distance()
            elif bandwidth == "loo":
                bandwidth = self._loo_bandwidth()
            else:
                raise KeceniInputError(f"unknown bandwidth rule '{bandwidth}'")
        if not bandwidth > 0:
            raise KeceniInputError("kernel bandwidth must be positive")
        self.bandwidth = float(bandwidth)

    def _distances(self, queries) -> np.ndarray:
        if self.generic:
            return np.array([[self.metric(q, k) for k in self.keys] for q in queries], dtype=float)
        return cdist(np.asarray(queries, dtype=float), self.keys, metric=self.metric)

    def _pairwise_sample(self, limit: int) -> np.ndarray:
        n = len(self.keys)
        take = np.unique(np.linspace(0, n - 1, min(n, limit)).astype(int))
        if self.generic:
            sub = [self.keys[k] for k in take]
            d = [self.metric(a, b) for a, b in itertools.combinations(sub, 2)]
            return np.asarray(d, dtype=float)
        return pdist(self.keys[take], metric=self.metric)

    def _median_distance(self) -> float:
        d = self._pairwise_sample(300 if self.generic else 2000)
        d = d[d > 0]
        return float(np.median(d)) if d.size else 1.0

    def _loo_bandwidth(self, n_grid: int = 12) -> float:
        """留一交叉验证选核带宽"""
        d = self._distances(self.keys)
        positive = d[d > 0]
        if positive.size == 0:
            return 1.0
        grid = np.geomspace(np.quantile(positive, 0.02), positive.max(), n_grid)
        best, best_err = grid[-1], np.inf
        y = self._train_targets
        inv = self._train_inverse
        for h in grid:
            w = triangular(d / h)
            num = (w @ self.sums)[inv] - y
            den = (w @ self.counts)[inv] - 1.0
            ok = den > 1e-12
            if ok.mean() < 0.5:
                continue
            err = float(np.mean((y[ok] - num[ok] / den[ok]) ** 2))
            if err < best_err - 1e-15:
                best, best_err = h, err
        logger.info("核回归留一带宽: %.4g (MSE %.4g)", best, best_err)
        return float(best)

    def predict(self, queries) -> np.ndarray:
        if self.generic:
            out = np.empty(len(queries))
            todo = [q for q in dict.fromkeys(queries) if q not in self._cache]
            if todo:
                for q, v in zip(todo, self._predict_unique(todo)):
                    self._cache[q] = v
            for r, q in enumerate(queries):
                out[r] = self._cache[q]
            return out
        queries = np.asarray(queries, dtype=float)
        uq, inv = np.unique(queries, axis=0, return_inverse=True)
        preds = np.empty(len(uq))
        rows = max(1, 4_000_000 // max(1, len(self.keys)))
        for start in range(0, len(uq), rows):
            block = uq[start:start + rows]
            preds[start:start + rows] = self._predict_unique(block)
        return preds[np.asarray(inv).reshape(-1)]

    def _predict_unique(self, queries) -> np.ndarray:
        d = self._distances(queries)
        w = triangular(d / self.bandwidth)
        num = w @ self.sums
        den = w @ self.counts
        empty = den <= 0
        out = np.divide(num, den, out=np.zeros_like(num), where=~empty)
        if empty.any():
            out[empty] = self.means[np.argmin(d[empty], axis=1)]
            self.fallback_count += int(empty.sum())
            if not self._warned:
                logger.warning("核回归在带宽 %.4g 内无样本, 退回最近邻", self.bandwidth)
                self._warned = True
        return out


def fit_kernel_regressor(train_keys, targets, bandwidth: Union[float, str] = "median", metric="cityblock") -> KernelRegressor:
    return KernelRegressor(train_keys, targets, bandwidth=bandwidth, metric=metric)


# ---------------------------------------------------------------------------
# 模型
# ---------------------------------------------------------------------------

class OutcomeModel:
    kind = "base"

    def __init__(self, feature_map: FeatureMap):
        self.feature_map = feature_map

    @property
    def parametric(self) -> bool:
        return False

    def predict(self, view: LocalView, t_local: np.ndarray, x_local: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ParametricOutcome(OutcomeModel):
    """线性或 logistic 结果回归；保留训练设计矩阵以便计算估计方程得分"""

    def __init__(self, feature_map: FeatureMap, beta: np.ndarray, link: str,
                 train_z: Optional[np.ndarray] = None, train_y: Optional[np.ndarray] = None):
        super().__init__(feature_map)
        self.beta = np.asarray(beta, dtype=float)
        self.link = link
        self.kind = "linear" if link == "identity" else "logistic"
        self.train_z = train_z
        self.train_y = train_y

    @property
    def parametric(self) -> bool:
        return True

    def _mean(self, eta: np.ndarray) -> np.ndarray:
        return eta if self.link == "identity" else expit(eta)

    def predict(self, view, t_local, x_local) -> np.ndarray:
        return self._mean(self.feature_map.outcome_features(view, t_local, x_local) @ self.beta)

    def gradient(self, view, t_local, x_local) -> np.ndarray:
        """∂μ/∂β，形状 (M, q)"""
        z = self.feature_map.outcome_features(view, t_local, x_local)
        if self.link == "identity":
            return z
        p = expit(z @ self.beta)
        return z * (p * (1.0 - p))[:, None]

    def scores(self) -> np.ndarray:
        """每个训练单元的估计方程 φ_k = z_k (y_k - μ_k)"""
        self._require_training()
        return self.train_z * (self.train_y - self._mean(self.train_z @ self.beta))[:, None]

    def bread(self) -> np.ndarray:
        self._require_training()
        z = self.train_z
        if self.link == "identity":
            return z.T @ z
        p = expit(z @ self.beta)
        return (z * (p * (1.0 - p))[:, None]).T @ z + settings.IRLS_RIDGE * np.eye(z.shape[1])

    def _require_training(self):
        if self.train_z is None:
            raise KeceniInputError("model was not fitted on data here; estimating-equation scores are unavailable")


class KernelOutcome(OutcomeModel):
    kind = "kernel"

    def __init__(self, feature_map: FeatureMap, regressor: KernelRegressor):
        super().__init__(feature_map)
        self.regressor = regressor

    def predict(self, view, t_local, x_local) -> np.ndarray:
        return self.regressor.predict(self.feature_map.outcome_features(view, t_local, x_local))


class PropensityModel:
    kind = "base"

    def __init__(self, feature_map: FeatureMap, eps: Optional[float] = None):
        self.feature_map = feature_map
        self.eps = settings.PROPENSITY_EPS if eps is None else float(eps)

    @property
    def parametric(self) -> bool:
        return False

    def _raw_prob(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def node_prob(self, view: LocalView, x_local: np.ndarray) -> np.ndarray:
        """(M, k) 截断后的 π̂°(t_j = 1 | x_{N_j})"""
        z = self.feature_map.propensity_features(view, x_local)
        m, k, q = z.shape
        p = self._raw_prob(z.reshape(m * k, q)).reshape(m, k)
        return np.clip(p, self.eps, 1.0 - self.eps)

    def joint(self, view: LocalView, t_local: np.ndarray, x_local: np.ndarray) -> np.ndarray:
        """(M,) 联合倾向 ∏_{j∈N_i} π̂°(t_j | x_{N_j})"""
        p = self.node_prob(view, x_local)
        t = np.asarray(t_local)[None, :]
        return np.prod(np.where(t == 1, p, 1.0 - p), axis=1)

    def fitted_node_prob(self, ds: Dataset) -> np.ndarray:
        return np.clip(self._raw_prob(self.feature_map.node_design(ds)), self.eps, 1.0 - self.eps)


class LogisticPropensity(PropensityModel):
    kind = "logistic"

    def __init__(self, feature_map: FeatureMap, beta: np.ndarray, eps: Optional[float] = None,
                 train_z: Optional[np.ndarray] = None, train_t: Optional[np.ndarray] = None):
        super().__init__(feature_map, eps)
        self.beta = np.asarray(beta, dtype=float)
        self.train_z = train_z
        self.train_t = train_t

    @property
    def parametric(self) -> bool:
        return True

    def _raw_prob(self, z: np.ndarray) -> np.ndarray:
        return expit(z @ self.beta)

    def joint_gradient(self, view: LocalView, t_local: np.ndarray, x_local: np.ndarray) -> np.ndarray:
        """∂π/∂β = π · Σ_{j∈N_i} ∂log π°_j/∂β；截断处的因子导数为 0"""
        z = self.feature_map.propensity_features(view, x_local)
        raw = expit(z @ self.beta)
        active = (raw > self.eps) & (raw < 1.0 - self.eps)
        t = np.asarray(t_local, dtype=float)[None, :]
        dlog = np.where(active, t - raw, 0.0)
        joint = self.joint(view, t_local, x_local)
        return joint[:, None] * np.einsum("mk,mkq->mq", dlog, z)

    def scores(self) -> np.ndarray:
        if self.train_z is None:
            raise KeceniInputError("model was not fitted on data here; estimating-equation scores are unavailable")
        return self.train_z * (self.train_t - expit(self.train_z @ self.beta))[:, None]

    def bread(self) -> np.ndarray:
        if self.train_z is None:
            raise KeceniInputError("model was not fitted on data here; estimating-equation scores are unavailable")
        z = self.train_z
        p = expit(z @ self.beta)
        return (z * (p * (1.0 - p))[:, None]).T @ z + settings.IRLS_RIDGE * np.eye(z.shape[1])


class KernelPropensity(PropensityModel):
    kind = "kernel"

    def __init__(self, feature_map: FeatureMap, regressor: KernelRegressor, eps: Optional[float] = None):
        super().__init__(feature_map, eps)
        self.regressor = regressor

    def _raw_prob(self, z: np.ndarray) -> np.ndarray:
        return self.regressor.predict(z)


# ---------------------------------------------------------------------------
# 点云键核回归：距离 = ego 的 L1 + 邻居经验分布之间的 W1
# ---------------------------------------------------------------------------

def _cloud(rows: np.ndarray) -> tuple:
    return tuple(sorted(tuple(float(v) for v in r) for r in rows))


class CloudKernelOutcome(OutcomeModel):
    """键为 ((t_i, x_i), {(t_j, x_j)}_{j∈N_i\\i})"""

    kind = "kernel-wasserstein"

    def __init__(self, feature_map: FeatureMap, regressor: KernelRegressor):
        super().__init__(feature_map)
        self.regressor = regressor

    @staticmethod
    def keys(view: LocalView, t_local: np.ndarray, x_local: np.ndarray) -> list:
        x_local = np.asarray(x_local, dtype=float)
        if x_local.ndim == 2:
            x_local = x_local[None]
        t_local = np.asarray(t_local, dtype=float)
        others = np.delete(np.arange(view.k), view.ego_in_nbhd)
        t_others = t_local[others][:, None]
        keys = []
        for prof in x_local:
            ego = (float(t_local[view.ego_in_nbhd]), *map(float, prof[view.ego_in_ball]))
            cloud = np.hstack([t_others, prof[view.nbhd_in_ball[others]]])
            keys.append((ego, _cloud(cloud)))
        return keys

    def predict(self, view, t_local, x_local) -> np.ndarray:
        return self.regressor.predict(self.keys(view, t_local, x_local))


class CloudKernelPropensity(PropensityModel):
    """节点 j 的键为 (x_j, {x_l}_{l∈N_j\\j})"""

    kind = "kernel-wasserstein"

    def __init__(self, feature_map: FeatureMap, regressor: KernelRegressor, eps: Optional[float] = None):
        super().__init__(feature_map, eps)
        self.regressor = regressor

    @staticmethod
    def keys(view: LocalView, x_local: np.ndarray) -> list:
        x_local = np.asarray(x_local, dtype=float)
        if x_local.ndim == 2:
            x_local = x_local[None]
        members = [np.flatnonzero(row) for row in view.member_avg_weights(1)]
        keys = []
        for prof in x_local:
            for r, pos in enumerate(view.nbhd_in_ball):
                keys.append((tuple(map(float, prof[pos])), _cloud(prof[members[r]])))
        return keys

    def node_prob(self, view: LocalView, x_local: np.ndarray) -> np.ndarray:
        x_local = np.asarray(x_local, dtype=float)
        m = 1 if x_local.ndim == 2 else x_local.shape[0]
        p = self.regressor.predict(self.keys(view, x_local)).reshape(m, view.k)
        return np.clip(p, self.eps, 1.0 - self.eps)

    def fitted_node_prob(self, ds: Dataset) -> np.ndarray:
        index = NeighborhoodIndex(ds.graph, 2)
        out = np.empty(ds.n)
        for i in range(ds.n):
            view = index.view(i)
            out[i] = self.node_prob(view, ds.x[view.ball])[0, view.ego_in_nbhd]
        return out


def _cloud_training(ds: Dataset) -> Tuple[list, list]:
    index = NeighborhoodIndex(ds.graph, 2)
    out_keys, pi_keys = [], []
    for i in range(ds.n):
        view = index.view(i)
        x_obs = ds.x[view.ball]
        out_keys.append(CloudKernelOutcome.keys(view, ds.t[view.nbhd], x_obs)[0])
        pi_keys.append(CloudKernelPropensity.keys(view, x_obs)[view.ego_in_nbhd])
    return out_keys, pi_keys


# ---------------------------------------------------------------------------
# 协变量分布
# ---------------------------------------------------------------------------

class CovariateDistribution:
    """经验乘积测度：每个位置独立、均匀地重抽一行观测协变量"""

    kind = "empirical-product"

    def __init__(self, x: np.ndarray):
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.n = self.x.shape[0]
        support, counts = np.unique(self.x, axis=0, return_counts=True)
        self.support = support
        self.freq = counts / counts.sum()

    def sample(self, size: int, m: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.n, size=(m, size))
        return self.x[idx]

    def sample_rows(self, size: int, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.n, size=(m, size))

    def profile_space(self, size: int) -> int:
        return len(self.support) ** size

    def exact_profiles(self, size: int, cap: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """枚举不同观测行的全部组合，返回 (profiles, 概率权重)"""
        cap = settings.EXACT_PROFILE_CAP if cap is None else cap
        space = self.profile_space(size)
        if space > cap:
            raise KeceniInputError(f"profile space {space} exceeds the enumeration cap {cap}")
        combos = np.array(list(itertools.product(range(len(self.support)), repeat=size)), dtype=np.int64)
        combos = combos.reshape(-1, size)
        weights = np.prod(self.freq[combos], axis=1) if size else np.ones(1)
        return self.support[combos], weights

    def integration(self, size: int, m: int, rng: np.random.Generator, mode: str = "auto",
                    cap: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """积分用的 (profiles, weights)：小空间精确枚举，否则 Monte Carlo"""
        cap = settings.EXACT_PROFILE_CAP if cap is None else cap
        if mode == "exact" or (mode == "auto" and self.profile_space(size) <= cap):
            return self.exact_profiles(size, cap=max(cap, self.profile_space(size)) if mode == "exact" else cap)
        if mode not in ("auto", "mc"):
            raise KeceniInputError(f"unknown integration mode '{mode}'")
        return self.sample(size, m, rng), np.full(m, 1.0 / m)


def sample_covariate_profiles(cd: CovariateDistribution, nodes: Sequence[int], m: int, seed: int) -> np.ndarray:
    """m 组协变量轮廓，形状 (m, len(nodes), p)"""
    if m < 1:
        raise KeceniInputError("draw count must be at least 1")
    rng = np.random.default_rng(seed)
    return cd.sample(len(nodes), m, rng)


# ---------------------------------------------------------------------------
# 组合与拟合入口
# ---------------------------------------------------------------------------

class NuisanceBundle(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    outcome: OutcomeModel
    propensity: PropensityModel
    covariates: CovariateDistribution
    index: NeighborhoodIndex
    standardize: Optional[Tuple[List[float], List[float]]] = None

    @property
    def hops(self) -> int:
        return self.index.hops

    @property
    def propensity_eps(self) -> float:
        return self.propensity.eps

    @property
    def graph(self):
        return self.index.graph


def support_hops(outcome_map: FeatureMap, propensity_map: FeatureMap) -> int:
    return max(outcome_map.support_hops, propensity_map.support_hops)


def joint_propensity(pm: PropensityModel, ds: Dataset, i: int, t_assign: np.ndarray,
                     index: Optional[NeighborhoodIndex] = None) -> float:
    """观测协变量下的联合倾向；t_assign 按闭邻域升序排列"""
    index = index or NeighborhoodIndex(ds.graph, pm.feature_map.support_hops)
    view = index.view(i)
    t_assign = np.asarray(t_assign)
    if t_assign.shape != (view.k,):
        raise KeceniInputError(f"assignment must cover the {view.k} nodes of N_{i}")
    return float(pm.joint(view, t_assign, ds.x[view.ball])[0])


def fit_linear_outcome(ds: Dataset, fm: FeatureMap) -> ParametricOutcome:
    ds.require_outcomes()
    z = fm.node_design(ds)
    beta = fit_least_squares(z, ds.y, fm.columns(ds.covariate_names))
    logger.info("线性结果回归拟合完成: %s, 系数 %s", fm.label, np.round(beta, 4).tolist())
    return ParametricOutcome(fm, beta, "identity", train_z=z, train_y=ds.y.copy())


def fit_logistic(ds: Dataset, fm: FeatureMap, eps: Optional[float] = None):
    """fm 为 outcome 映射时拟合二元结果回归，为 propensity 映射时拟合节点级倾向"""
    z = fm.node_design(ds)
    if fm.role == "outcome":
        ds.require_outcomes()
        beta = fit_irls(z, ds.y)
        logger.info("logistic 结果回归拟合完成: %s", fm.label)
        return ParametricOutcome(fm, beta, "logit", train_z=z, train_y=ds.y.copy())
    beta = fit_irls(z, ds.t.astype(float))
    model = LogisticPropensity(fm, beta, eps=eps, train_z=z, train_t=ds.t.astype(float))
    clamped = np.mean((expit(z @ beta) <= model.eps) | (expit(z @ beta) >= 1.0 - model.eps))
    if clamped > 0.05:
        logger.warning("倾向得分截断比例 %.1f%% 超过 5%%", 100 * clamped)
    logger.info("logistic 倾向得分拟合完成: %s, 系数 %s", fm.label, np.round(beta, 4).tolist())
    return model


def fit_kernel_outcome(ds: Dataset, fm: FeatureMap, bandwidth: Union[float, str] = "median") -> KernelOutcome:
    ds.require_outcomes()
    reg = fit_kernel_regressor(fm.node_design(ds), ds.y, bandwidth=bandwidth)
    logger.info("核结果回归拟合完成: %s, 带宽 %.4g", fm.label, reg.bandwidth)
    return KernelOutcome(fm, reg)


def fit_kernel_propensity(ds: Dataset, fm: FeatureMap, bandwidth: Union[float, str] = "median",
                          eps: Optional[float] = None) -> KernelPropensity:
    reg = fit_kernel_regressor(fm.node_design(ds), ds.t.astype(float), bandwidth=bandwidth)
    logger.info("核倾向得分拟合完成: %s, 带宽 %.4g", fm.label, reg.bandwidth)
    return KernelPropensity(fm, reg, eps=eps)


def standardize_covariates(ds: Dataset) -> Tuple[Dataset, Tuple[List[float], List[float]]]:
    mean = ds.x.mean(axis=0)
    std = ds.x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return ds.with_covariates((ds.x - mean) / std), (mean.tolist(), std.tolist())


def fit_bundle(
    ds: Dataset,
    outcome_model: str = "linear",
    outcome_map: str = "nodewise-outcome",
    propensity_model: str = "logistic",
    propensity_map: str = "nodewise-propensity",
    alpha_mu: Optional[float] = None,
    alpha_pi: Optional[float] = None,
    bandwidth: Union[float, str] = "median",
    eps: Optional[float] = None,
    standardize: bool = False,
) -> Tuple[NuisanceBundle, Dataset]:
    """
    拟合三个 nuisance 对象

    Returns:
        (bundle, 拟合所用数据集)；standardize=True 时数据集的协变量已经 z-score
    """
    scaling = None
    if standardize:
        ds, scaling = standardize_covariates(ds)
    om = get_feature_map(outcome_map, alpha_mu)
    pm = get_feature_map(propensity_map, alpha_pi)
    if om.role != "outcome" or pm.role != "propensity":
        raise KeceniInputError("outcome/propensity feature maps are swapped")

    cloud_keys = None
    if "kernel-wasserstein" in (outcome_model, propensity_model):
        cloud_keys = _cloud_training(ds)
        # 点云键只描述一跳邻域
        if outcome_model == "kernel-wasserstein":
            om = get_feature_map("ate-summary")
        if propensity_model == "kernel-wasserstein":
            pm = get_feature_map("ate-summary-propensity")

    if outcome_model == "linear":
        outcome = fit_linear_outcome(ds, om)
    elif outcome_model == "logistic":
        outcome = fit_logistic(ds, om)
    elif outcome_model == "kernel":
        outcome = fit_kernel_outcome(ds, om, bandwidth)
    elif outcome_model == "kernel-wasserstein":
        ds.require_outcomes()
        reg = fit_kernel_regressor(cloud_keys[0], ds.y, bandwidth=bandwidth, metric=cloud_distance)
        outcome = CloudKernelOutcome(om, reg)
        logger.info("点云核结果回归拟合完成, 带宽 %.4g", reg.bandwidth)
    else:
        raise KeceniInputError(f"unknown outcome model '{outcome_model}'")

    if propensity_model == "logistic":
        propensity = fit_logistic(ds, pm, eps=eps)
    elif propensity_model == "kernel":
        propensity = fit_kernel_propensity(ds, pm, bandwidth, eps=eps)
    elif propensity_model == "kernel-wasserstein":
        reg = fit_kernel_regressor(cloud_keys[1], ds.t.astype(float), bandwidth=bandwidth, metric=cloud_distance)
        propensity = CloudKernelPropensity(pm, reg, eps=eps)
        logger.info("点云核倾向得分拟合完成, 带宽 %.4g", reg.bandwidth)
    else:
        raise KeceniInputError(f"unknown propensity model '{propensity_model}'")

    bundle = NuisanceBundle(
        outcome=outcome,
        propensity=propensity,
        covariates=CovariateDistribution(ds.x),
        index=NeighborhoodIndex(ds.graph, support_hops(om, pm)),
        standardize=scaling,
    )
    return bundle, ds


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def model_to_dict(model, table_path: Optional[Path] = None) -> dict:
    fm = model.feature_map
    out = {"kind": model.kind, "feature_map": fm.name, "alpha": fm.alpha,
           "role": fm.role}
    if isinstance(model, ParametricOutcome):
        out.update(beta=model.beta.tolist(), link=model.link)
    elif isinstance(model, LogisticPropensity):
        out.update(beta=model.beta.tolist(), eps=model.eps)
    else:
        reg = model.regressor
        if reg.generic:
            raise KeceniInputError("kernel models with custom key metrics cannot be saved")
        out.update(bandwidth=reg.bandwidth, metric=reg.metric)
        if isinstance(model, KernelPropensity):
            out["eps"] = model.eps
        if table_path is not None:
            table = pd.DataFrame(
                np.repeat(reg.keys, reg.counts.astype(int), axis=0),
                columns=[f"k{c}" for c in range(reg.keys.shape[1])],
            )
            table["target"] = _expand_targets(reg)
            table.to_csv(table_path, index=False)
            out["table"] = str(Path(table_path).name)
    return out


def _expand_targets(reg: KernelRegressor) -> np.ndarray:
    """训练目标按去重键的顺序排列，与 np.repeat(keys, counts) 逐行对齐"""
    order = np.argsort(reg._train_inverse, kind="stable")
    return reg._train_targets[order]


def save_model(model, path: Union[str, Path]):
    path = Path(path)
    table = path.with_suffix(".table.csv") if model.kind == "kernel" else None
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model, table), f, indent=2)


def load_model(path: Union[str, Path]):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        spec = json.load(f)
    fm = get_feature_map(spec["feature_map"], spec.get("alpha"))
    kind = spec["kind"]
    if spec["role"] == "outcome" and kind in ("linear", "logistic"):
        return ParametricOutcome(fm, np.array(spec["beta"]), spec["link"])
    if spec["role"] == "propensity" and kind == "logistic":
        return LogisticPropensity(fm, np.array(spec["beta"]), eps=spec.get("eps"))
    if kind == "kernel":
        table = pd.read_csv(path.parent / spec["table"])
        reg = KernelRegressor(table.drop(columns="target").to_numpy(), table["target"].to_numpy(),
                              bandwidth=spec["bandwidth"], metric=spec["metric"])
        if spec["role"] == "outcome":
            return KernelOutcome(fm, reg)
        return KernelPropensity(fm, reg, eps=spec.get("eps"))
    raise KeceniInputError(f"cannot load model of kind '{kind}'")
