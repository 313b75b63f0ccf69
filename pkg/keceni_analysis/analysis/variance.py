"""
三明治方差与 HAC 区间

Ŵ_i = D̂⁻¹ [κ_λ(Δ_i)(ξ̂_i - θ̂) + 干扰模型误差的线性化传播]
- simple: 只保留第一项
- full: 另加参数化 μ̂/π̂ 的估计方程线性化与经验乘积测度的 Hájek 投影
σ̂² = Σ_{dist(i,j) <= r} Ŵ_i Ŵ_j；σ̂² <= 0 时退回对角和
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import KeceniInputError, SingularBreadError
from keceni_analysis.core.graph import Graph, LocalView, hop_reach_matrix
from keceni_analysis.core.models import Dataset, Estimate, InfluenceVector, PseudoOutcome, VarianceReport
from keceni_analysis.core.workers import parallel_map, task_rng

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


def xi_partials(po: PseudoOutcome) -> Tuple[float, float, float, float]:
    """(∂ξ/∂μ, ∂ξ/∂m, ∂ξ/∂π, ∂ξ/∂ϖ)"""
    resid = po.y - po.mu
    return -po.varpi / po.pi, 1.0, -resid * po.varpi / po.pi ** 2, resid / po.pi


def _xi_partials_table(table) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    resid = table.y - table.mu
    return -table.varpi / table.pi, np.ones_like(resid), -resid * table.varpi / table.pi ** 2, resid / table.pi


# ---------------------------------------------------------------------------
# 估计方程线性化
# ---------------------------------------------------------------------------

def bread_solver(model) -> Callable[[np.ndarray], np.ndarray]:
    """返回 v -> B⁻¹ v；B 为正定的 bread 矩阵"""
    bread = model.bread()
    cond = float(np.linalg.cond(bread))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularBreadError(cond)
    try:
        factor = linalg.cho_factor(bread)
    except linalg.LinAlgError:
        raise SingularBreadError(cond)
    logger.debug("bread 条件数 %.3g", cond)
    return lambda v: linalg.cho_solve(factor, v)


def _require_parametric(model, what: str):
    if not getattr(model, "parametric", False):
        raise KeceniInputError(f"{what} linearization needs a parametric model")


def h_mu(model, ds: Dataset, i: int, view: LocalView, t_local: np.ndarray,
         x_local: Optional[np.ndarray] = None, solve: Optional[Callable] = None) -> float:
    """
    单元 i 的估计方程贡献对 μ̂(query) 的影响：∂μ/∂β · B⁻¹ φ_{μ,i}

    Args:
        view, t_local, x_local: 查询位置 (节点 view.node 的局部配置)，x_local 默认为观测协变量
    """
    _require_parametric(model, "outcome")
    x_local = ds.x[view.ball] if x_local is None else x_local
    solve = solve or bread_solver(model)
    grad = model.gradient(view, t_local, x_local)[0]
    return float(grad @ solve(model.scores()[i]))


def h_pi(model, ds: Dataset, i: int, view: LocalView, t_local: np.ndarray,
         x_local: Optional[np.ndarray] = None, solve: Optional[Callable] = None) -> float:
    """单元 i 对联合倾向 π̂(t_local | x) 的影响：∂π/∂β_π · B_π⁻¹ φ_{π,i}"""
    _require_parametric(model, "propensity")
    x_local = ds.x[view.ball] if x_local is None else x_local
    solve = solve or bread_solver(model)
    grad = model.joint_gradient(view, t_local, x_local)[0]
    return float(grad @ solve(model.scores()[i]))


# ---------------------------------------------------------------------------
# 经验乘积测度的 Hájek 投影
# ---------------------------------------------------------------------------

def hajek_projection(cd, f: Callable[[np.ndarray], np.ndarray], size: int, m: int,
                     rng: np.random.Generator) -> np.ndarray:
    """
    h_k = (1/n) Σ_r (E[f | X_r = x_k] - E f)，k 为观测行

    条件期望用 m 组公共随机补全估计；E f 取各行条件期望的均值，因此 Σ_k h_k = 0
    f 对各位置可加时 m = 1 已精确
    """
    n = cd.n
    out = np.zeros(n)
    if size == 0:
        return out
    if m < 1:
        raise KeceniInputError("draw count must be at least 1")
    completions = cd.sample_rows(size, m, rng)
    rows = np.arange(n)
    for r in range(size):
        idx = np.broadcast_to(completions, (n, m, size)).copy()
        idx[:, :, r] = rows[:, None]
        vals = np.asarray(f(cd.x[idx.reshape(n * m, size)]), dtype=float).reshape(n, m).mean(axis=1)
        out += vals - vals.mean()
    return out / n


def h_cov(cd, f: Callable[[np.ndarray], np.ndarray], i: int, size: int, m: Optional[int] = None,
          seed: int = 0) -> float:
    """节点 i 的协变量行对 ∫ f dP̂ 的 Hájek 影响"""
    m = settings.MC_DRAWS_FULL if m is None else m
    return float(hajek_projection(cd, f, size, m, task_rng(seed, "hajek", 0))[i])


# ---------------------------------------------------------------------------
# Ŵ
# ---------------------------------------------------------------------------

def assemble_influence(
    weights: np.ndarray,
    xi: np.ndarray,
    theta: float,
    d_hat: float,
    phi_mu: Optional[np.ndarray] = None,
    solve_mu: Optional[Callable] = None,
    g_mu: Optional[np.ndarray] = None,
    phi_pi: Optional[np.ndarray] = None,
    solve_pi: Optional[Callable] = None,
    g_pi: Optional[np.ndarray] = None,
    hajek: Optional[np.ndarray] = None,
) -> InfluenceVector:
    """把直接项与传播项合成为 Ŵ；只给直接项时即 simple 模式"""
    direct = weights * (xi - theta)
    prop = np.zeros_like(direct)
    full = False
    if phi_mu is not None:
        prop += phi_mu @ solve_mu(g_mu)
        full = True
    if phi_pi is not None:
        prop += phi_pi @ solve_pi(g_pi)
        full = True
    if hajek is not None:
        prop += hajek
        full = True
    mass = float(np.abs(direct).sum() + np.abs(prop).sum())
    share = float(np.abs(prop).sum() / mass) if mass > 0 else 0.0
    return InfluenceVector(
        mode="full" if full else "simple",
        w=(direct + prop) / d_hat,
        diagnostics={"propagation_share": share, "d_hat": float(d_hat)},
    )


def _node_propagation(estimator, j: int, kappa: float, partials, mc_full: int):
    ds, nb = estimator.ds, estimator.bundle
    outcome, prop, cd = nb.outcome, nb.propensity, nb.covariates
    a, b, c, d = partials
    view = nb.index.view(j)
    t_loc = ds.t[view.nbhd]
    x_obs = ds.x[view.ball]
    # 与伪结果相同的积分抽样
    profiles, pw = cd.integration(view.size, estimator.mc_draws, task_rng(estimator.seed, "mc", j),
                                  mode=estimator.integration)

    g_mu = kappa * (a * outcome.gradient(view, t_loc, x_obs)[0] + b * (pw @ outcome.gradient(view, t_loc, profiles)))
    g_pi = kappa * (c * prop.joint_gradient(view, t_loc, x_obs)[0]
                    + d * (pw @ prop.joint_gradient(view, t_loc, profiles)))

    additive = outcome.kind == "linear"
    h = kappa * b * hajek_projection(
        cd, lambda prof: outcome.predict(view, t_loc, prof), view.size, 1 if additive else mc_full,
        task_rng(estimator.seed, "hajek", 2 * j),
    )
    if d != 0.0:
        h = h + kappa * d * hajek_projection(
            cd, lambda prof: prop.joint(view, t_loc, prof), view.size, mc_full,
            task_rng(estimator.seed, "hajek", 2 * j + 1),
        )
    return g_mu, g_pi, h


def influence_vector(estimator, metric, kernel, sc, est: Estimate, mode: str = "simple",
                     mc_draws_full: Optional[int] = None) -> InfluenceVector:
    """
    Args:
        estimator: 计算 est 所用的 KeceniEstimator
        est: 同一 (metric, kernel, sc) 下的估计结果
        mode: simple | full
    """
    if est.target != sc.target:
        raise KeceniInputError("estimate and scenario refer to different targets")
    weights, xi = est.weights, est.xi
    if mode == "simple":
        return assemble_influence(weights, xi, est.theta, est.d_hat)
    if mode != "full":
        raise KeceniInputError(f"unknown variance mode '{mode}'")

    nb = estimator.bundle
    if not (nb.outcome.parametric and nb.propensity.parametric):
        raise KeceniInputError("full-mode variance needs parametric nuisance models; use --variance simple")
    mc_full = settings.MC_DRAWS_FULL if mc_draws_full is None else int(mc_draws_full)

    partials = _xi_partials_table(estimator.table)
    active = np.flatnonzero(weights > 0)
    parts = parallel_map(
        lambda j: _node_propagation(estimator, int(j), float(weights[j]), tuple(p[j] for p in partials), mc_full),
        active,
        estimator.threads,
    )
    g_mu = np.zeros(len(nb.outcome.beta))
    g_pi = np.zeros(len(nb.propensity.beta))
    hajek = np.zeros(estimator.ds.n)
    for gm, gp, h in parts:
        g_mu += gm
        g_pi += gp
        hajek += h

    iv = assemble_influence(
        weights, xi, est.theta, est.d_hat,
        phi_mu=nb.outcome.scores(), solve_mu=bread_solver(nb.outcome), g_mu=g_mu,
        phi_pi=nb.propensity.scores(), solve_pi=bread_solver(nb.propensity), g_pi=g_pi,
        hajek=hajek,
    )
    logger.info("full 模式影响向量: 目标 %s, 传播项占比 %.3f", sc.target, iv.diagnostics["propagation_share"])
    return iv


def combine_influence(coefs: Sequence[float], vectors: Sequence[InfluenceVector]) -> InfluenceVector:
    """线性组合 Σ c_k Ŵ^{(k)}，用于效应差与平均效应"""
    if len(coefs) != len(vectors) or not vectors:
        raise KeceniInputError("coefficients and influence vectors must be non-empty and aligned")
    w = np.zeros_like(vectors[0].w)
    for c, v in zip(coefs, vectors):
        if v.w.shape != w.shape:
            raise KeceniInputError("influence vectors have different lengths")
        w = w + float(c) * v.w
    modes = {v.mode for v in vectors}
    return InfluenceVector(mode=modes.pop() if len(modes) == 1 else "full", w=w)


def hac_variance(iv, g: Graph, radius: Optional[int] = None, alpha: float = 0.05,
                 theta: float = 0.0) -> VarianceReport:
    """
    σ̂² = Σ_{i,j: dist <= radius} Ŵ_i Ŵ_j，区间 θ̂ ± z_{1-α/2} σ̂
    """
    radius = settings.HAC_RADIUS if radius is None else int(radius)
    if radius < 0:
        raise KeceniInputError("HAC radius must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise KeceniInputError("alpha must lie in (0, 1)")
    w = iv.w if isinstance(iv, InfluenceVector) else np.asarray(iv, dtype=float)
    if w.shape != (g.n,):
        raise KeceniInputError("influence vector length does not match the graph")
    mode = iv.mode if isinstance(iv, InfluenceVector) else "simple"

    raw = float(w @ (hop_reach_matrix(g, radius).astype(float) @ w))
    fallback = raw <= 0.0
    sigma2 = float(w @ w) if fallback else raw
    if fallback:
        logger.warning("HAC 方差 %.4g <= 0, 退回对角和 %.4g", raw, sigma2)
    half = float(stats.norm.ppf(1.0 - alpha / 2.0)) * float(np.sqrt(sigma2))
    return VarianceReport(
        sigma2=sigma2,
        ci=(theta - half, theta + half),
        level=1.0 - alpha,
        mode=mode,
        radius=radius,
        fallback_used=fallback,
    )


def estimate_with_variance(estimator, metric, kernel, sc, mode: str = "simple", radius: Optional[int] = None,
                           alpha: float = 0.05, mc_draws_full: Optional[int] = None
                           ) -> Tuple[Estimate, VarianceReport]:
    """估计 + 区间；结果写回 Estimate 的 sigma2/ci"""
    est = estimator.estimate(sc, metric, kernel)
    iv = influence_vector(estimator, metric, kernel, sc, est, mode=mode, mc_draws_full=mc_draws_full)
    report = hac_variance(iv, estimator.ds.graph, radius, alpha, est.theta)
    est.sigma2 = report.sigma2
    est.ci = report.ci
    return est, report
