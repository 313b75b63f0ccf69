"""
处理场景构造与效应汇总
场景对按 (t¹, t⁰) 顺序返回，效应 = θ(t¹) - θ(t⁰)
- de_pair: 目标节点 1 vs 0，邻居保持观测处理
- spe_pair: 目标节点固定为 t*，邻居全 1 vs 全 0
- spe_observed_pair: 目标节点保持观测处理，邻居全 1 vs 全 0
- balanced_de_pair: 目标节点 1 vs 0，邻居中前一半 (按编号) 接受处理
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from keceni_analysis.core.errors import KeceniInputError, NoComparableUnitsError
from keceni_analysis.core.graph import Graph, closed_neighborhood
from keceni_analysis.core.models import Dataset, TreatmentScenario

logger = logging.getLogger(__name__)

ScenarioPair = Tuple[TreatmentScenario, TreatmentScenario]

DEGREE_BINS = ((0, 0), (1, 4), (5, 8), (9, None))


def _scenario(g: Graph, target: int, values: Dict[int, int], label: str) -> TreatmentScenario:
    return TreatmentScenario(target=int(target), assignment=values, label=label).validate_on(g)


def all_treated(g: Graph, target: int) -> TreatmentScenario:
    return _scenario(g, target, {int(j): 1 for j in closed_neighborhood(g, target)}, "all_treated")


def none_treated(g: Graph, target: int) -> TreatmentScenario:
    return _scenario(g, target, {int(j): 0 for j in closed_neighborhood(g, target)}, "none_treated")


def de_pair(ds: Dataset, target: int) -> ScenarioPair:
    g = ds.graph
    base = {int(j): int(ds.t[j]) for j in closed_neighborhood(g, target)}
    return (
        _scenario(g, target, {**base, int(target): 1}, "de_treated"),
        _scenario(g, target, {**base, int(target): 0}, "de_control"),
    )


def spe_pair(g: Graph, target: int, t_ego: int) -> ScenarioPair:
    if t_ego not in (0, 1):
        raise KeceniInputError("ego treatment must be 0 or 1")
    nb = closed_neighborhood(g, target)
    ones = {int(j): 1 for j in nb}
    zeros = {int(j): 0 for j in nb}
    ones[int(target)] = zeros[int(target)] = int(t_ego)
    return (
        _scenario(g, target, ones, f"spe{t_ego}_treated"),
        _scenario(g, target, zeros, f"spe{t_ego}_control"),
    )


def spe_observed_pair(ds: Dataset, target: int) -> ScenarioPair:
    return spe_pair(ds.graph, target, int(ds.t[target]))


def balanced_de_pair(g: Graph, target: int) -> ScenarioPair:
    others = [int(j) for j in g.neighbors(target)]
    half = set(others[: len(others) // 2])
    base = {j: int(j in half) for j in others}
    return (
        _scenario(g, target, {**base, int(target): 1}, "balanced_treated"),
        _scenario(g, target, {**base, int(target): 0}, "balanced_control"),
    )


def scenario_builders(ds: Dataset, target: int) -> Dict[str, object]:
    """目标节点的全部标准场景"""
    g = ds.graph
    return {
        "all_treated": all_treated(g, target),
        "none_treated": none_treated(g, target),
        "de": de_pair(ds, target),
        "spe0": spe_pair(g, target, 0),
        "spe1": spe_pair(g, target, 1),
        "spe_observed": spe_observed_pair(ds, target),
        "balanced_de": balanced_de_pair(g, target),
    }


def degree_bin_labels(bins: Sequence[Tuple[int, Optional[int]]] = DEGREE_BINS) -> List[str]:
    labels = []
    for lo, hi in bins:
        if hi is None:
            labels.append(f">={lo}")
        elif lo == hi:
            labels.append(str(lo))
        else:
            labels.append(f"{lo}-{hi}")
    return labels


def assign_degree_bins(degree: np.ndarray, bins: Sequence[Tuple[int, Optional[int]]] = DEGREE_BINS) -> np.ndarray:
    labels = degree_bin_labels(bins)
    out = np.full(len(degree), None, dtype=object)
    for (lo, hi), label in zip(bins, labels):
        sel = (degree >= lo) & ((degree <= hi) if hi is not None else True)
        out[sel & (out == None)] = label  # noqa: E711
    return out


def aggregate_over_nodes(values: Sequence[float], degree: Optional[np.ndarray] = None,
                         grouping: str = "all",
                         bins: Sequence[Tuple[int, Optional[int]]] = DEGREE_BINS) -> pd.DataFrame:
    """
    节点级估计的分组均值

    Returns:
        DataFrame(group, count, mean)
    """
    values = np.asarray(values, dtype=float)
    if grouping == "all":
        return pd.DataFrame({"group": ["all"], "count": [len(values)], "mean": [float(np.mean(values))]})
    if grouping != "degree-bins":
        raise KeceniInputError(f"unknown grouping '{grouping}'")
    if degree is None:
        raise KeceniInputError("degree-bins grouping needs node degrees")
    df = pd.DataFrame({"group": assign_degree_bins(np.asarray(degree), bins), "value": values})
    labels = degree_bin_labels(bins)
    out = df.dropna(subset=["group"]).groupby("group", sort=False)["value"].agg(["count", "mean"])
    out = out.reindex([l for l in labels if l in out.index]).reset_index()
    return out.rename(columns={"index": "group"})


def compare_groups(values: Sequence[float], degree: np.ndarray,
                   bins: Sequence[Tuple[int, Optional[int]]] = DEGREE_BINS) -> pd.DataFrame:
    """度分组之间的 Welch 双样本 t 检验 (未做多重比较校正)"""
    values = np.asarray(values, dtype=float)
    groups = assign_degree_bins(np.asarray(degree), bins)
    labels = [l for l in degree_bin_labels(bins) if np.sum(groups == l) >= 2]
    rows = []
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            va = values[groups == labels[a]]
            vb = values[groups == labels[b]]
            res = stats.ttest_ind(va, vb, equal_var=False)
            rows.append({
                "group_a": labels[a], "group_b": labels[b],
                "mean_a": float(va.mean()), "mean_b": float(vb.mean()),
                "statistic": float(res.statistic), "p_value": float(res.pvalue),
                "adjusted": False,
            })
    return pd.DataFrame(rows, columns=["group_a", "group_b", "mean_a", "mean_b", "statistic", "p_value", "adjusted"])


def average_effects(estimator, targets: Sequence[int], builder: Callable[[int], ScenarioPair], metric, kernel,
                    variance: Optional[str] = None, radius: int = 2, level: float = 0.95,
                    mc_draws_full: Optional[int] = None, skip_empty: bool = False) -> Dict[str, object]:
    """
    多个目标节点上的效应及其平均 (ADE / ASpE / ATE)

    Args:
        estimator: KeceniEstimator
        builder: target -> (t¹ 场景, t⁰ 场景)
        variance: None | simple | full，给出平均效应的 HAC 区间
        skip_empty: 核质量为 0 的目标跳过并计数，否则抛出 NoComparableUnitsError
    Returns:
        {"per_target": DataFrame, "mean_treated", "mean_control", "effect", "skipped", "variance": {...}}
    """
    from keceni_analysis.analysis.variance import combine_influence, hac_variance, influence_vector

    ds = estimator.ds
    summaries = estimator.summaries(metric)
    cache: Dict[tuple, tuple] = {}
    rows = []
    iv_pos, iv_neg = [], []
    skipped = 0
    for target in targets:
        sc1, sc0 = builder(int(target))
        out = []
        for sc in (sc1, sc0):
            key = metric.scenario_summary(ds.graph, sc)
            # 摘要相同的目标共享 Δ 向量，从而共享估计
            if key not in cache:
                try:
                    est = estimator.estimate_from_deltas(metric.distances(summaries, key), kernel, sc, metric)
                except NoComparableUnitsError:
                    if not skip_empty:
                        raise
                    cache[key] = None
                    continue
                iv = None
                if variance:
                    iv = influence_vector(estimator, metric, kernel, sc, est, mode=variance,
                                          mc_draws_full=mc_draws_full)
                cache[key] = (est, iv)
            out.append(cache[key])
        if len(out) < 2 or any(o is None for o in out):
            skipped += 1
            continue
        (e1, v1), (e0, v0) = out
        rows.append({"target": int(target), "theta_treated": e1.theta, "theta_control": e0.theta,
                     "effect": e1.theta - e0.theta})
        if variance:
            iv_pos.append(v1)
            iv_neg.append(v0)

    if not rows:
        raise NoComparableUnitsError(kernel.bandwidth, float("nan"))
    if skipped:
        logger.warning("%s 个目标在带宽 %.4g 内没有可比单元, 已跳过", skipped, kernel.bandwidth)
    per_target = pd.DataFrame(rows)
    result: Dict[str, object] = {
        "per_target": per_target,
        "mean_treated": float(per_target["theta_treated"].mean()),
        "mean_control": float(per_target["theta_control"].mean()),
        "effect": float(per_target["effect"].mean()),
        "skipped": skipped,
    }
    if variance:
        k = len(rows)
        reports = {}
        for name, vecs, coefs, center in (
            ("mean_treated", iv_pos, [1.0 / k] * k, result["mean_treated"]),
            ("mean_control", iv_neg, [1.0 / k] * k, result["mean_control"]),
            ("effect", iv_pos + iv_neg, [1.0 / k] * k + [-1.0 / k] * k, result["effect"]),
        ):
            combined = combine_influence(coefs, vecs)
            reports[name] = hac_variance(combined, ds.graph, radius, 1.0 - level, center)
        result["variance"] = reports
    logger.info("平均效应完成: %s 个目标, 效应 %.4f", len(targets), result["effect"])
    return result
