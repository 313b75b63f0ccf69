"""
模拟实验复现
A1 节点级估计  A2 双稳健网格  A3 平均处理效应  A4 样本量与 RMSE 斜率
A5 忽略网络的 AIPW 对照  A6 方差区间覆盖率
每个实验写出结果 CSV、report.json/report.csv (criterion, value, threshold, passed) 与 manifest.json
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats

from keceni_analysis.analysis.bandwidth import cv_select
from keceni_analysis.analysis.dissimilarity import DissimilarityMetric
from keceni_analysis.analysis.estimator import KeceniEstimator, Kernel, aipw_sutva, g_computation
from keceni_analysis.analysis.nuisance import fit_bundle
from keceni_analysis.analysis.scenarios import all_treated, average_effects, none_treated
from keceni_analysis.analysis.variance import combine_influence, hac_variance, influence_vector
from keceni_analysis.core.errors import KeceniInputError, NoComparableUnitsError
from keceni_analysis.core.models import Dataset, SimConfig
from keceni_analysis.core.storage import StorageManager
from keceni_analysis.core.workers import parallel_map, task_seed
from keceni_analysis.data.providers.nodewise_world import NodewiseWorld
from keceni_analysis.data.simulation import gen_latent_network, nested_subgraphs, simulate_replication

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ["rep", "target", "scenario", "theta", "d_hat", "lambda", "sigma", "ci_lo", "ci_hi"]

ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(11))

SCALES: Dict[str, Dict[str, dict]] = {
    "A1": {
        "smoke": dict(n=150, reps=2, mc_draws=50),
        "desk": dict(n=500, reps=40, mc_draws=100),
        "full": dict(n=1000, reps=80, mc_draws=200),
    },
    "A2": {
        "smoke": dict(n=150, reps=2, mc_draws=50, alphas=(0.0, 1.0)),
        "desk": dict(n=500, reps=20, mc_draws=100, alphas=ALPHA_GRID),
        "full": dict(n=1000, reps=80, mc_draws=200, alphas=ALPHA_GRID),
    },
    "A3": {
        "smoke": dict(n=300, reps=1, mc_draws=50),
        "desk": dict(n=2000, reps=10, mc_draws=100),
        "full": dict(n=4000, reps=80, mc_draws=200),
    },
    "A4": {
        "smoke": dict(sizes=(100, 200), reps=2, mc_draws=50, pre_n=1000),
        "desk": dict(sizes=(250, 500, 1000, 2000), reps=20, mc_draws=100, pre_n=4000),
        "full": dict(sizes=(250, 500, 1000, 2000, 4000), reps=80, mc_draws=200, pre_n=4000),
    },
    "A5": {
        "smoke": dict(n=150, reps=2),
        "desk": dict(n=500, reps=40),
        "full": dict(n=1000, reps=80),
    },
    "A6": {
        "smoke": dict(n=150, reps=2, mc_draws=50, mc_draws_full=5),
        "desk": dict(n=500, reps=40, mc_draws=100, mc_draws_full=10),
        "full": dict(n=1000, reps=200, mc_draws=200, mc_draws_full=50),
    },
}

ATE_TRUTHS = {"treated": 0.594, "control": 0.406, "ate": 0.188}


def _criterion(name: str, value: float, threshold: str, passed: bool) -> dict:
    return {"criterion": name, "value": float(value), "threshold": threshold, "passed": bool(passed)}


def _within(name: str, value: float, lo: float, hi: float) -> dict:
    return _criterion(name, value, f"[{lo:g}, {hi:g}]", lo <= value <= hi)


def _at_least(name: str, value: float, bound: float) -> dict:
    return _criterion(name, value, f">= {bound:g}", value >= bound)


def _at_most(name: str, value: float, bound: float) -> dict:
    return _criterion(name, value, f"<= {bound:g}", value <= bound)


def _rmse(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    errors = errors[np.isfinite(errors)]
    return float(np.sqrt(np.mean(errors ** 2))) if errors.size else float("nan")


def _fixed_network(cfg: SimConfig):
    """所有重复共用的一张网络；目标为 ‖Z‖∞ 最小的节点，只有处理与结果逐重复重抽"""
    graph, z = gen_latent_network(cfg.n, cfg.rho, cfg.beta, task_seed(cfg.seed, "network", 0), cfg.box)
    logger.info("固定网络: n=%s, 边=%s", graph.n, graph.n_edges)
    return graph, z


def _fit_estimator(ds: Dataset, seed: int, mc_draws: int, outcome_model: str = "linear",
                   outcome_map: str = "nodewise-outcome", propensity_model: str = "logistic",
                   propensity_map: str = "nodewise-propensity", alpha_mu: Optional[float] = None,
                   alpha_pi: Optional[float] = None, bandwidth="median") -> KeceniEstimator:
    bundle, ds_fit = fit_bundle(
        ds, outcome_model=outcome_model, outcome_map=outcome_map, propensity_model=propensity_model,
        propensity_map=propensity_map, alpha_mu=alpha_mu, alpha_pi=alpha_pi, bandwidth=bandwidth,
    )
    return KeceniEstimator(ds_fit, bundle, mc_draws=mc_draws, seed=seed, threads=1)


def _estimate_rows(estimator: KeceniEstimator, metric: DissimilarityMetric, kernel: Kernel, scenarios: dict,
                   rep: int, truths: dict) -> List[dict]:
    rows = []
    for name, sc in scenarios.items():
        try:
            est = estimator.estimate(sc, metric, kernel)
            theta, d_hat = est.theta, est.d_hat
        except NoComparableUnitsError:
            logger.warning("重复 %s 场景 %s 无可比单元", rep, name)
            theta, d_hat = float("nan"), 0.0
        rows.append({
            "rep": rep, "target": sc.target, "scenario": name, "theta": theta, "d_hat": d_hat,
            "lambda": kernel.bandwidth, "sigma": None, "ci_lo": None, "ci_hi": None,
            "truth": truths[name],
        })
    return rows


# ---------------------------------------------------------------------------
# A1 节点级估计
# ---------------------------------------------------------------------------

def run_a1(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="nodewise", n=params["n"], reps=params["reps"], seed=seed)
    graph, z = _fixed_network(cfg)
    metric = DissimilarityMetric("summary-l1")

    def one(rep: int) -> List[dict]:
        rec = simulate_replication(cfg, rep, graph, z)
        estimator = _fit_estimator(rec["dataset"], rec["seed"], params["mc_draws"])
        cv = cv_select(estimator.ds, estimator.bundle, metric, estimator=estimator, threads=1)
        return _estimate_rows(estimator, metric, Kernel(cv.chosen), rec["scenarios"], rep, rec["truths"])

    rows = [r for chunk in parallel_map(one, range(cfg.reps), threads) for r in chunk]
    df = pd.DataFrame(rows)
    store.save_csv("estimates.csv", df[ESTIMATE_COLUMNS + ["truth"]])

    treated = df[df["scenario"] == "treated"].set_index("rep")["theta"]
    control = df[df["scenario"] == "control"].set_index("rep")["theta"]
    diff = (treated - control).mean()
    return [
        _within("A1 mean theta(all-treated)", treated.mean(), 1.4, 2.4),
        _within("A1 mean theta(none-treated)", control.mean(), -2.4, -1.4),
        _within("A1 mean difference", diff, 2.8, 4.2),
    ]


# ---------------------------------------------------------------------------
# A2 双稳健网格
# ---------------------------------------------------------------------------

def run_a2(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="dr", n=params["n"], reps=params["reps"], seed=seed)
    graph, z = _fixed_network(cfg)
    metric = DissimilarityMetric("summary-l1")
    alphas = params["alphas"]
    cells = [(a_pi, a_mu) for a_pi in alphas for a_mu in alphas]

    def one(rep: int) -> List[dict]:
        rec = simulate_replication(cfg, rep, graph, z)
        ds = rec["dataset"]
        rows = []
        kernel = None
        for a_pi, a_mu in cells:
            estimator = _fit_estimator(
                ds, rec["seed"], params["mc_draws"], outcome_map="dr-outcome", propensity_map="dr-propensity",
                alpha_mu=a_mu, alpha_pi=a_pi,
            )
            if kernel is None:
                # λ 在正确设定的 (0, 0) 单元上选出后用于本重复的所有单元
                cv = cv_select(estimator.ds, estimator.bundle, metric, estimator=estimator, threads=1)
                kernel = Kernel(cv.chosen)
            for row in _estimate_rows(estimator, metric, kernel, rec["scenarios"], rep, rec["truths"]):
                sc = rec["scenarios"][row["scenario"]]
                row.update(alpha_pi=a_pi, alpha_mu=a_mu,
                           theta_g=g_computation(estimator.bundle, sc, params["mc_draws"], rec["seed"]))
                rows.append(row)
        return rows

    rows = [r for chunk in parallel_map(one, range(cfg.reps), threads) for r in chunk]
    df = pd.DataFrame(rows)
    df["err_k"] = df["theta"] - df["truth"]
    df["err_g"] = df["theta_g"] - df["truth"]
    store.save_csv("estimates.csv", df[ESTIMATE_COLUMNS + ["alpha_pi", "alpha_mu", "theta_g", "truth"]])

    grid = (
        df.groupby(["alpha_pi", "alpha_mu"])
        .agg(rmse_g=("err_g", _rmse), rmse_keceni=("err_k", _rmse))
        .reset_index()
    )
    store.save_csv("rmse_grid.csv", grid[["alpha_pi", "alpha_mu", "rmse_g", "rmse_keceni"]])

    def cell(a_pi, a_mu, col):
        sel = grid[np.isclose(grid["alpha_pi"], a_pi) & np.isclose(grid["alpha_mu"], a_mu)]
        return float(sel[col].iloc[0])

    base_k = cell(0.0, 0.0, "rmse_keceni")
    g_wrong_mu = min(cell(a, 1.0, "rmse_g") for a in (0.0, 1.0))
    g_right_mu = [cell(a, 0.0, "rmse_g") for a in (0.0, 1.0)]
    return [
        _at_most("A2 KECENI rmse(0,1)/rmse(0,0)", cell(0.0, 1.0, "rmse_keceni") / base_k, 2.0),
        _at_most("A2 KECENI rmse(1,0)/rmse(0,0)", cell(1.0, 0.0, "rmse_keceni") / base_k, 2.0),
        _at_least("A2 KECENI rmse(1,1)/rmse(0,0)", cell(1.0, 1.0, "rmse_keceni") / base_k, 2.5),
        _at_least("A2 G-comp rmse(.,1)/rmse(.,0)", g_wrong_mu / max(g_right_mu), 2.5),
        _at_most("A2 G-comp alpha_pi sensitivity", max(g_right_mu) / min(g_right_mu), 1.3),
    ]


# ---------------------------------------------------------------------------
# A3 平均处理效应
# ---------------------------------------------------------------------------

def run_a3(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="ate", n=params["n"], reps=params["reps"], seed=seed)
    metric = DissimilarityMetric("wasserstein-treatment")

    def one(rep: int) -> dict:
        rec = simulate_replication(cfg, rep)
        ds = rec["dataset"]
        estimator = _fit_estimator(
            ds, rec["seed"], params["mc_draws"], outcome_model="kernel", outcome_map="ate-moments",
            propensity_model="kernel", propensity_map="ate-moments-propensity", bandwidth="loo",
        )
        cv = cv_select(estimator.ds, estimator.bundle, metric, estimator=estimator, threads=1)
        g = ds.graph
        res = average_effects(
            estimator, range(ds.n), lambda i: (all_treated(g, i), none_treated(g, i)), metric,
            Kernel(cv.chosen), skip_empty=True,
        )
        return {
            "rep": rep, "lambda": cv.chosen, "mean_treated": res["mean_treated"],
            "mean_control": res["mean_control"], "ate": res["effect"], "skipped": res["skipped"],
            "true_treated": rec["truths"]["population_treated"],
            "true_control": rec["truths"]["population_control"],
            "true_ate": rec["truths"]["population_ate"],
        }

    df = pd.DataFrame(parallel_map(one, range(cfg.reps), threads))
    store.save_csv("ate.csv", df)
    return [
        _at_most("A3 |mean ATE - 0.188|", abs(df["ate"].mean() - ATE_TRUTHS["ate"]), 0.08),
        _at_most("A3 |mean theta(all-treated) - 0.594|", abs(df["mean_treated"].mean() - ATE_TRUTHS["treated"]), 0.06),
        _at_most("A3 |mean theta(none-treated) - 0.406|", abs(df["mean_control"].mean() - ATE_TRUTHS["control"]), 0.06),
    ]


# ---------------------------------------------------------------------------
# A4 样本量
# ---------------------------------------------------------------------------

def run_a4(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="nodewise", n=max(params["sizes"]), reps=params["reps"], seed=seed)
    world = NodewiseWorld(cfg)
    metric = DissimilarityMetric("summary-l1")
    graphs = nested_subgraphs(params["sizes"], cfg.rho, cfg.beta, seed, pre_n=params["pre_n"])

    tasks = [(n, rep) for n in sorted(graphs) for rep in range(cfg.reps)]

    def one(task) -> List[dict]:
        n, rep = task
        graph, _ = graphs[n]
        rep_seed = task_seed(seed, "rep", rep)
        ds = world.generate(graph, rep_seed)
        scenarios = {"treated": all_treated(graph, 0), "control": none_treated(graph, 0)}
        truths = {k: world.true_theta(graph, sc) for k, sc in scenarios.items()}
        estimator = _fit_estimator(ds, rep_seed, params["mc_draws"])
        cv = cv_select(estimator.ds, estimator.bundle, metric, estimator=estimator, threads=1)
        rows = _estimate_rows(estimator, metric, Kernel(cv.chosen), scenarios, rep, truths)
        for row in rows:
            row["n"] = n
        return rows

    rows = [r for chunk in parallel_map(one, tasks, threads) for r in chunk]
    df = pd.DataFrame(rows)
    df["err"] = df["theta"] - df["truth"]
    store.save_csv("estimates.csv", df[["n"] + ESTIMATE_COLUMNS + ["truth"]])
    scaling = df.groupby("n")["err"].apply(_rmse).reset_index(name="rmse")
    store.save_csv("scaling.csv", scaling)

    fit = stats.linregress(np.log(scaling["n"]), np.log(scaling["rmse"]))
    store.save_json("slope.json", {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.rvalue ** 2})
    decreasing = bool(np.all(np.diff(scaling["rmse"].to_numpy()) < 0))
    return [
        _within("A4 log-log slope", fit.slope, -0.50, -0.12),
        _criterion("A4 rmse strictly decreasing", float(decreasing), "== 1", decreasing),
    ]


# ---------------------------------------------------------------------------
# A5 忽略网络的 AIPW
# ---------------------------------------------------------------------------

def run_a5(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="nodewise", n=params["n"], reps=params["reps"], seed=seed)
    graph, z = _fixed_network(cfg)

    def one(rep: int) -> dict:
        rec = simulate_replication(cfg, rep, graph, z)
        theta1, theta0, diff = aipw_sutva(rec["dataset"])
        total = rec["truths"]["treated"] - rec["truths"]["control"]
        return {"rep": rep, "theta1": theta1, "theta0": theta0, "diff": diff, "total_effect": total}

    df = pd.DataFrame(parallel_map(one, range(cfg.reps), threads))
    store.save_csv("aipw.csv", df)
    mean_diff = float(df["diff"].mean())
    return [
        _within("A5 SUTVA-AIPW mean difference", mean_diff, 1.6, 2.4),
        _at_least("A5 |total effect - AIPW difference|", abs(float(df["total_effect"].mean()) - mean_diff), 1.2),
    ]


# ---------------------------------------------------------------------------
# A6 覆盖率
# ---------------------------------------------------------------------------

def run_a6(params: dict, seed: int, threads: Optional[int], store: StorageManager) -> List[dict]:
    cfg = SimConfig(experiment="dr", n=params["n"], reps=params["reps"], seed=seed)
    graph, z = _fixed_network(cfg)
    metric = DissimilarityMetric("summary-l1")

    def one(rep: int) -> List[dict]:
        rec = simulate_replication(cfg, rep, graph, z)
        estimator = _fit_estimator(
            rec["dataset"], rec["seed"], params["mc_draws"], outcome_map="dr-outcome",
            propensity_map="dr-propensity", alpha_mu=0.0, alpha_pi=0.0,
        )
        cv = cv_select(estimator.ds, estimator.bundle, metric, estimator=estimator, threads=1)
        kernel = Kernel(cv.chosen)
        g = estimator.ds.graph
        rows = []
        ests = {name: estimator.estimate(sc, metric, kernel) for name, sc in rec["scenarios"].items()}
        truth_diff = rec["truths"]["treated"] - rec["truths"]["control"]
        for mode in ("simple", "full"):
            ivs = {
                name: influence_vector(estimator, metric, kernel, rec["scenarios"][name], est, mode=mode,
                                       mc_draws_full=params["mc_draws_full"])
                for name, est in ests.items()
            }
            targets = {
                "treated": (ivs["treated"], ests["treated"].theta, rec["truths"]["treated"]),
                "control": (ivs["control"], ests["control"].theta, rec["truths"]["control"]),
                "difference": (
                    combine_influence([1.0, -1.0], [ivs["treated"], ivs["control"]]),
                    ests["treated"].theta - ests["control"].theta,
                    truth_diff,
                ),
            }
            for estimand, (iv, theta, truth) in targets.items():
                report = hac_variance(iv, g, 2, 0.05, theta)
                rows.append({
                    "rep": rep, "setting": mode, "estimand": estimand, "theta": theta, "truth": truth,
                    "lambda": kernel.bandwidth, "sigma": report.sigma, "ci_lo": report.ci[0], "ci_hi": report.ci[1],
                    "covered": report.ci[0] <= truth <= report.ci[1], "fallback": report.fallback_used,
                })
        return rows

    rows = [r for chunk in parallel_map(one, range(cfg.reps), threads) for r in chunk]
    df = pd.DataFrame(rows)
    store.save_csv("intervals.csv", df)
    coverage = df.groupby(["setting", "estimand"])["covered"].mean().reset_index(name="coverage")
    store.save_csv("coverage.csv", coverage)

    def cov(setting, estimand):
        sel = coverage[(coverage["setting"] == setting) & (coverage["estimand"] == estimand)]
        return float(sel["coverage"].iloc[0])

    report = [_at_least(f"A6 simple coverage {e}", cov("simple", e), 0.85)
              for e in ("control", "treated", "difference")]
    report += [_at_least(f"A6 full - simple coverage {e}", cov("full", e) - cov("simple", e), -0.05)
               for e in ("control", "treated", "difference")]
    return report


EXPERIMENTS: Dict[str, Callable] = {
    "A1": run_a1,
    "A2": run_a2,
    "A3": run_a3,
    "A4": run_a4,
    "A5": run_a5,
    "A6": run_a6,
}


def run_experiment(experiment: str, scale: str = "desk", out=None, seed: int = 0,
                   threads: Optional[int] = None) -> List[dict]:
    """运行实验并写出 report.json / report.csv；返回判据列表"""
    if experiment not in EXPERIMENTS:
        raise KeceniInputError(f"unknown experiment '{experiment}'; choose from {sorted(EXPERIMENTS)}")
    if scale not in SCALES[experiment]:
        raise KeceniInputError(f"unknown scale '{scale}'")
    params = SCALES[experiment][scale]
    store = StorageManager(Path(out) if out is not None else None)
    store.save_manifest("reproduce", {
        "experiment": experiment, "scale": scale, "seed": seed, "threads": threads, "params": params,
    })
    logger.info("开始实验 %s (%s): %s", experiment, scale, params)
    report = EXPERIMENTS[experiment](params, seed, threads, store)
    store.save_json("report.json", {"experiment": experiment, "scale": scale, "criteria": report})
    store.save_rows("report.csv", report, ["criterion", "value", "threshold", "passed"])
    passed = sum(r["passed"] for r in report)
    logger.info("实验 %s 完成: %s/%s 项判据通过", experiment, passed, len(report))
    return report
