"""
特征映射
把 (节点 i, 局部处理向量, 局部协变量) 变换为回归特征
局部协变量张量形状为 (M, s, p)：M 组协变量轮廓 × 支撑集 ball 的 s 个位置
Avg 约定：孤立节点的邻居平均记为 0
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Literal, Optional

import numpy as np
from scipy import sparse

from keceni_analysis.core.errors import KeceniInputError
from keceni_analysis.core.graph import Graph, LocalView, hop_reach_matrix
from keceni_analysis.core.models import Dataset


def _transform(kind: str, alpha: float, x: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "mixed":
        return (1.0 - alpha) * x + alpha * x ** 2
    if kind == "interaction":
        return ((x[..., 0] - 0.5) * (x[..., 1] - 0.5))[..., None]
    if kind == "moments":
        p = x.shape[-1]
        prods = [x[..., a] * x[..., b] for a in range(p) for b in range(a + 1, p)]
        return np.concatenate([x, np.stack(prods, axis=-1)], axis=-1) if prods else x
    raise KeceniInputError(f"unknown covariate transform '{kind}'")


def interaction_w(x: np.ndarray) -> np.ndarray:
    """w(x) = (x1 - 0.5)(x2 - 0.5)"""
    return _transform("interaction", 0.0, np.asarray(x, dtype=float))[..., 0]


def avg_operator(g: Graph, hops: int) -> sparse.csr_matrix:
    """行归一化的 Avg(· over N_i^{(hops)} \\ i) 稀疏算子；孤立行全 0"""
    reach = hop_reach_matrix(g, hops).astype(float).tolil()
    reach.setdiag(0.0)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    counts = np.asarray(reach.sum(axis=1)).reshape(-1)
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return sparse.diags(scale) @ reach


@dataclass(frozen=True)
class FeatureMap:
    name: str
    role: Literal["outcome", "propensity"]
    transform: str = "identity"
    alpha: float = 0.0
    intercept: bool = True
    ego_covariates: bool = True
    neighbor_hops: int = 1
    neighbor_treatment: bool = True
    centered_ego_treatment: bool = True

    @property
    def label(self) -> str:
        if self.transform == "mixed":
            return f"{self.name}({self.alpha:g})"
        return self.name

    @property
    def support_hops(self) -> int:
        """评估节点 i 的特征 (或其联合倾向) 所需的支撑半径"""
        return self.neighbor_hops if self.role == "outcome" else self.neighbor_hops + 1

    def g(self, x: np.ndarray) -> np.ndarray:
        return _transform(self.transform, self.alpha, np.asarray(x, dtype=float))

    def columns(self, covariate_names: List[str]) -> List[str]:
        sample = self.g(np.zeros((1, len(covariate_names))))
        q = sample.shape[-1]
        if self.transform == "identity":
            base = list(covariate_names)
        elif self.transform == "mixed":
            base = [f"mix({c})" for c in covariate_names]
        elif self.transform == "interaction":
            base = ["w"]
        else:
            names = list(covariate_names)
            base = names + [f"{names[a]}*{names[b]}" for a in range(len(names)) for b in range(a + 1, len(names))]
        base = base[:q]
        cols = ["const"] if self.intercept else []
        if self.role == "outcome":
            cols.append("t_ego")
            if self.neighbor_treatment:
                cols.append("t_avg")
        if self.ego_covariates:
            cols += base
        cols += [f"avg_{c}" for c in base]
        return cols

    def width(self, p: int) -> int:
        return len(self.columns([f"x{k + 1}" for k in range(p)]))

    def outcome_features(self, view: LocalView, t_local: np.ndarray, x_local: np.ndarray) -> np.ndarray:
        """(M, width) 结果回归特征；t_local 按 view.nbhd 排列"""
        self._require("outcome")
        x_local = np.asarray(x_local, dtype=float)
        if x_local.ndim == 2:
            x_local = x_local[None]
        m = x_local.shape[0]
        t_local = np.asarray(t_local, dtype=float)
        gx = self.g(x_local)
        blocks = []
        if self.intercept:
            blocks.append(np.ones((m, 1)))
        ego_t = t_local[view.ego_in_nbhd]
        blocks.append(np.full((m, 1), ego_t - 0.5 if self.centered_ego_treatment else ego_t))
        if self.neighbor_treatment:
            avg_t = float((t_local - 0.5) @ view.treatment_avg_weights())
            blocks.append(np.full((m, 1), avg_t))
        if self.ego_covariates:
            blocks.append(gx[:, view.ego_in_ball, :])
        blocks.append(np.einsum("s,msq->mq", view.ego_avg_weights(self.neighbor_hops), gx))
        return np.concatenate(blocks, axis=1)

    def propensity_features(self, view: LocalView, x_local: np.ndarray) -> np.ndarray:
        """(M, k, width) 节点级倾向特征，k 为 view.nbhd 中每个成员 j"""
        self._require("propensity")
        x_local = np.asarray(x_local, dtype=float)
        if x_local.ndim == 2:
            x_local = x_local[None]
        m = x_local.shape[0]
        gx = self.g(x_local)
        blocks = []
        if self.intercept:
            blocks.append(np.ones((m, view.k, 1)))
        if self.ego_covariates:
            blocks.append(gx[:, view.nbhd_in_ball, :])
        blocks.append(np.einsum("ks,msq->mkq", view.member_avg_weights(self.neighbor_hops), gx))
        return np.concatenate(blocks, axis=2)

    def node_design(self, ds: Dataset) -> np.ndarray:
        """观测数据上的 (n, width) 设计矩阵；outcome 用观测处理，propensity 每行对应节点自身"""
        gx = self.g(ds.x)
        avg_x = avg_operator(ds.graph, self.neighbor_hops) @ gx
        n = ds.n
        blocks = []
        if self.intercept:
            blocks.append(np.ones((n, 1)))
        if self.role == "outcome":
            tc = ds.t.astype(float) - 0.5
            blocks.append((tc if self.centered_ego_treatment else ds.t.astype(float))[:, None])
            if self.neighbor_treatment:
                blocks.append((avg_operator(ds.graph, 1) @ tc)[:, None])
        if self.ego_covariates:
            blocks.append(gx)
        blocks.append(avg_x)
        return np.concatenate(blocks, axis=1)

    def _require(self, role: str):
        if self.role != role:
            raise KeceniInputError(f"feature map '{self.label}' is a {self.role} map, not {role}")


def builtin_feature_maps() -> Dict[str, FeatureMap]:
    return dict(_CATALOG)


_CATALOG: Dict[str, FeatureMap] = {
    "nodewise-outcome": FeatureMap("nodewise-outcome", "outcome", neighbor_hops=2),
    "nodewise-propensity": FeatureMap("nodewise-propensity", "propensity"),
    "dr-outcome": FeatureMap("dr-outcome", "outcome", transform="mixed", neighbor_hops=2),
    "dr-propensity": FeatureMap("dr-propensity", "propensity", transform="mixed"),
    "ate-outcome": FeatureMap("ate-outcome", "outcome", transform="interaction"),
    "ate-propensity": FeatureMap("ate-propensity", "propensity", transform="interaction"),
    "ate-summary": FeatureMap(
        "ate-summary", "outcome", intercept=False, centered_ego_treatment=False,
    ),
    "ate-summary-propensity": FeatureMap("ate-summary-propensity", "propensity", intercept=False),
    # 二元协变量下 (x, x1*x2) 的邻居均值恰好决定邻居协变量的经验分布
    "ate-moments": FeatureMap(
        "ate-moments", "outcome", transform="moments", intercept=False, centered_ego_treatment=False,
    ),
    "ate-moments-propensity": FeatureMap("ate-moments-propensity", "propensity", transform="moments", intercept=False),
}

_NAME_RE = re.compile(r"^\s*([a-z\-]+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*$")


@lru_cache(maxsize=None)
def get_feature_map(name: str, alpha: Optional[float] = None) -> FeatureMap:
    """按名称取特征映射；'dr-outcome(0.3)' 或 alpha 参数设置误设程度"""
    match = _NAME_RE.match(name)
    if not match or match.group(1) not in _CATALOG:
        raise KeceniInputError(f"unknown feature map '{name}'; choose from {sorted(_CATALOG)}")
    base = _CATALOG[match.group(1)]
    if match.group(2) is not None:
        alpha = float(match.group(2))
    if alpha is None or base.transform != "mixed":
        return base
    if not 0.0 <= alpha <= 1.0:
        raise KeceniInputError("misspecification level alpha must lie in [0, 1]")
    return FeatureMap(
        base.name, base.role, transform="mixed", alpha=float(alpha), intercept=base.intercept,
        ego_covariates=base.ego_covariates, neighbor_hops=base.neighbor_hops,
        neighbor_treatment=base.neighbor_treatment,
    )
