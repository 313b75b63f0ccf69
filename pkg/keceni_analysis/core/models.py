from __future__ import annotations

import json
import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from keceni_analysis.core.errors import KeceniInputError, ScenarioError
from keceni_analysis.core.graph import Graph, closed_neighborhood


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


class Dataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    graph: Graph
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    ids: List[str] = Field(default_factory=list)
    covariate_names: List[str] = Field(default_factory=list)
    quality_flags: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shapes(self):
        n = self.graph.n
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.t = np.asarray(self.t).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        self.x = x.reshape(n, -1) if x.ndim == 1 else x
        if self.y.shape[0] != n or self.t.shape[0] != n or self.x.shape[0] != n:
            raise KeceniInputError(
                f"dataset arrays must have length n={n} "
                f"(y={self.y.shape[0]}, t={self.t.shape[0]}, x={self.x.shape[0]})"
            )
        if not np.all(np.isin(self.t, (0, 1))):
            raise KeceniInputError("treatment must be 0/1")
        self.t = self.t.astype(np.int64)
        if np.isnan(self.x).any():
            raise KeceniInputError("covariates contain NaN")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if not self.covariate_names:
            self.covariate_names = [f"x{k + 1}" for k in range(self.x.shape[1])]
        return self

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def y_missing(self) -> np.ndarray:
        return np.isnan(self.y)

    def require_outcomes(self, nodes: Optional[np.ndarray] = None):
        missing = self.y_missing if nodes is None else self.y_missing[nodes]
        if missing.any():
            where = np.flatnonzero(self.y_missing) if nodes is None else np.asarray(nodes)[missing]
            raise KeceniInputError(
                f"outcome y is missing for {len(where)} node(s), e.g. id {self.ids[int(where[0])]}"
            )

    def induced(self, nodes) -> "Dataset":
        sub, kept = self.graph.subgraph(nodes)
        return Dataset(
            graph=sub, y=self.y[kept], t=self.t[kept], x=self.x[kept],
            ids=[self.ids[k] for k in kept], covariate_names=list(self.covariate_names),
        )

    def relabel(self, perm) -> "Dataset":
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        return Dataset(
            graph=self.graph.relabel(perm), y=self.y[inv], t=self.t[inv], x=self.x[inv],
            ids=[self.ids[k] for k in inv], covariate_names=list(self.covariate_names),
        )

    def with_covariates(self, x: np.ndarray, names: Optional[List[str]] = None) -> "Dataset":
        return Dataset(
            graph=self.graph, y=self.y, t=self.t, x=x, ids=list(self.ids),
            covariate_names=names or list(self.covariate_names),
            quality_flags=list(self.quality_flags),
        )


class TreatmentScenario(BaseModel):
    target: int
    assignment: Dict[int, int]
    label: str = ""

    @field_validator("assignment")
    @classmethod
    def _binary(cls, v: Dict[int, int]):
        for k, val in v.items():
            if val not in (0, 1):
                raise ScenarioError(f"assignment value for node {k} must be 0 or 1, got {val!r}")
        return {int(k): int(val) for k, val in v.items()}

    def validate_on(self, g: Graph) -> "TreatmentScenario":
        if not 0 <= self.target < g.n:
            raise ScenarioError(f"target {self.target} is not a node of the graph")
        expected = set(closed_neighborhood(g, self.target).tolist())
        keys = set(self.assignment)
        missing = sorted(expected - keys)
        extra = sorted(keys - expected)
        if missing:
            raise ScenarioError(f"assignment is missing neighborhood node(s) {missing}")
        if extra:
            raise ScenarioError(f"assignment has node(s) {extra} outside the closed neighborhood")
        return self

    def local_vector(self, g: Graph) -> np.ndarray:
        """按闭邻域升序排列的 0/1 向量"""
        self.validate_on(g)
        return np.array([self.assignment[j] for j in closed_neighborhood(g, self.target)], dtype=np.int64)


class PseudoOutcome(BaseModel):
    node: int
    xi: float
    y: float
    mu: float
    pi: float
    m: float
    varpi: float
    mc_draws: int

    @model_validator(mode="after")
    def _assembled(self):
        expected = (self.y - self.mu) / self.pi * self.varpi + self.m
        if not np.isclose(self.xi, expected, rtol=1e-12, atol=1e-12):
            raise ValueError("xi does not match its components")
        return self


class Estimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta: float
    d_hat: float
    bandwidth: float
    metric: str
    kernel: str
    seed: int
    target: int
    scenario: str = ""
    n_effective: float
    nodes: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray
    xi: np.ndarray
    sigma2: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    quality_flags: List[str] = Field(default_factory=list)

    def per_node_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "node": self.nodes, "delta": self.deltas, "weight": self.weights, "xi": self.xi,
        })

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta,
            "d_hat": self.d_hat,
            "lambda": self.bandwidth,
            "n_effective": self.n_effective,
            "target": self.target,
            "scenario": self.scenario,
            "metric": self.metric,
            "kernel": self.kernel,
            "seed": self.seed,
            "per_node": self.per_node_frame().to_dict(orient="records"),
            "quality_flags": self.quality_flags,
        }
        if self.sigma2 is not None:
            out["sigma2"] = self.sigma2
            out["ci"] = list(self.ci) if self.ci else None
        return _jsonable(out)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=indent)


class CVResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    grid: List[float]
    mse: List[float]
    n_used: List[int]
    n_skipped: List[int]
    chosen: float
    xi: np.ndarray
    leave_out: np.ndarray  # (n, len(grid))，节点被跳过时为 NaN
    quality_flags: List[str] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"lambda": self.grid, "mse": self.mse, "n_used": self.n_used})

    def per_node_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.leave_out, columns=[f"theta_{g:.6g}" for g in self.grid])
        df.insert(0, "xi", self.xi)
        df.insert(0, "node", np.arange(len(self.xi)))
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    def to_dict(self) -> dict:
        return _jsonable({
            "grid": self.grid, "mse": self.mse, "n_used": self.n_used,
            "n_skipped": self.n_skipped, "chosen": self.chosen,
            "quality_flags": self.quality_flags,
        })

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


class InfluenceVector(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mode: Literal["simple", "full"]
    w: np.ndarray
    diagnostics: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _finite(self):
        self.w = np.asarray(self.w, dtype=float)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("influence values must be finite")
        return self

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(_jsonable({"mode": self.mode, "w": self.w, "diagnostics": self.diagnostics}), indent=indent)


class VarianceReport(BaseModel):
    sigma2: float
    ci: Tuple[float, float]
    level: float
    mode: str
    radius: int
    fallback_used: bool
    note: str = "interval targets the kernel-smoothed mean; smoothing bias is not corrected"

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    def to_dict(self) -> dict:
        return _jsonable({
            "sigma2": self.sigma2, "ci": list(self.ci), "level": self.level, "mode": self.mode,
            "radius": self.radius, "fallback_used": self.fallback_used, "note": self.note,
        })


class SimConfig(BaseModel):
    experiment: Literal["nodewise", "dr", "ate"] = "nodewise"
    n: int = 1000
    reps: int = 1
    seed: int = 0

    # 隐空间网络
    rho: float = 2.0
    beta: float = 10.0
    box: float = 1.0

    # 节点级世界
    beta_pi0: float = 0.0
    beta_pi1: List[float] = Field(default_factory=lambda: [0.5, 0.5, 0.5])
    beta_pi2: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    beta_mu0: float = 0.0
    beta_mu1: float = 2.0
    beta_mu2: float = 2.0
    beta_mu3: List[float] = Field(default_factory=lambda: [-1.55, -1.55, -1.55])
    beta_mu4: List[float] = Field(default_factory=lambda: [-1.55, -1.55, -1.55])

    # ATE 世界
    ate_beta_pi: float = 5.0
    ate_beta_mu1: float = 1.0
    ate_beta_mu2: float = -7.0

    # 拟合阶段的误设程度
    alpha_pi: float = 0.0
    alpha_mu: float = 0.0

    @field_validator("rho")
    @classmethod
    def _rho_positive(cls, v: float):
        if v <= 0:
            raise ValueError("rho must be positive")
        return v

    @field_validator("n", "reps")
    @classmethod
    def _positive_int(cls, v: int):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("alpha_pi", "alpha_mu")
    @classmethod
    def _unit(cls, v: float):
        if not 0.0 <= v <= 1.0:
            raise ValueError("misspecification level must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _widths(self):
        p = len(self.beta_pi1)
        if not (len(self.beta_pi2) == len(self.beta_mu3) == len(self.beta_mu4) == p):
            raise ValueError("covariate coefficient vectors must share one width")
        return self

    @property
    def p(self) -> int:
        return 2 if self.experiment == "ate" else len(self.beta_pi1)
