"""
模拟数据生成
1. 隐空间网络：Z_i ~ U[-box, box]²，P(i~j) = min(1, ρ·exp(-e^{β‖Z_i - Z_j‖∞}))
2. 在网络上由 WorldProvider 生成 (Y, T, X)
3. 目标节点取 ‖Z‖∞ 最小者，并给出场景真值
每个重复 r 使用子种子 task_seed(seed, "rep", r)，各分量 (network/covariates/treatment/outcome) 独立派生
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from keceni_analysis.analysis.scenarios import all_treated, balanced_de_pair, none_treated
from keceni_analysis.core.config import settings
from keceni_analysis.core.errors import KeceniInputError
from keceni_analysis.core.graph import Graph, build_graph
from keceni_analysis.core.models import Dataset, SimConfig, TreatmentScenario
from keceni_analysis.core.workers import task_rng, task_seed
from keceni_analysis.data.loader import write_dataset, write_scenario
from keceni_analysis.data.providers.ate_world import AteWorld
from keceni_analysis.data.providers.base import WorldProvider
from keceni_analysis.data.providers.nodewise_world import NodewiseWorld

logger = logging.getLogger(__name__)


def edge_probability(d: np.ndarray, rho: float, beta: float) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.minimum(1.0, rho * np.exp(-np.exp(beta * np.asarray(d, dtype=float))))


def gen_latent_network(n: int, rho: float = 2.0, beta: float = 10.0, seed: int = 0,
                       box: float = 1.0) -> Tuple[Graph, np.ndarray]:
    """
    Returns:
        (Graph, Z)，Z 形状 (n, 2)
    """
    if n < 1:
        raise KeceniInputError("network size must be at least 1")
    if rho <= 0:
        raise KeceniInputError("rho must be positive")
    rng = task_rng(seed, "network")
    z = rng.uniform(-box, box, size=(n, 2))
    blocks = []
    for i in range(n - 1):
        d = np.abs(z[i + 1:] - z[i]).max(axis=1)
        hit = rng.random(n - 1 - i) < edge_probability(d, rho, beta)
        js = np.flatnonzero(hit) + i + 1
        if js.size:
            blocks.append(np.column_stack([np.full(js.size, i), js]))
    edges = np.vstack(blocks) if blocks else np.zeros((0, 2), dtype=np.int64)
    g = build_graph(n, edges)
    logger.info("隐空间网络生成: n=%s, 边=%s, 平均度 %.2f", n, g.n_edges, float(g.degree.mean()))
    return g, z


def world_for(cfg: SimConfig) -> WorldProvider:
    return AteWorld(cfg) if cfg.experiment == "ate" else NodewiseWorld(cfg)


def gen_nodewise_data(g: Graph, cfg: SimConfig, seed: int) -> Dataset:
    return NodewiseWorld(cfg).generate(g, seed)


def gen_ate_data(g: Graph, cfg: SimConfig, seed: int) -> Dataset:
    return AteWorld(cfg).generate(g, seed)


def select_target(z: np.ndarray) -> int:
    """‖Z_i‖∞ 最小的节点，并列取较小编号"""
    z = np.asarray(z, dtype=float)
    if len(z) == 0:
        raise KeceniInputError("no nodes to select a target from")
    return int(np.argmin(np.abs(z).max(axis=1)))


def true_theta(g: Graph, cfg: SimConfig, sc: TreatmentScenario) -> float:
    return world_for(cfg).true_theta(g, sc)


def nested_subgraphs(sizes: Iterable[int], rho: float = 2.0, beta: float = 10.0, seed: int = 0,
                     pre_n: int = 4000, box: float = 2.0) -> Dict[int, Tuple[Graph, np.ndarray]]:
    """
    一次隐空间抽样上的嵌套诱导子图
    节点按 ‖Z‖∞ 升序重新编号，规模 n 的子图取前 n 个节点，因此节点 0 始终为目标
    """
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes or sizes[0] < 1 or sizes[-1] > pre_n:
        raise KeceniInputError(f"subgraph sizes must lie in 1..{pre_n}")
    g, z = gen_latent_network(pre_n, rho, beta, seed, box)
    norm = np.abs(z).max(axis=1)
    order = np.lexsort((np.arange(pre_n), norm))
    rank = np.empty(pre_n, dtype=np.int64)
    rank[order] = np.arange(pre_n)
    g_sorted = g.relabel(rank)
    z_sorted = z[order]
    return {n: (g_sorted.subgraph(range(n))[0], z_sorted[:n]) for n in sizes}


def target_scenarios(ds: Dataset, cfg: SimConfig, target: int) -> Dict[str, TreatmentScenario]:
    """实验对应的目标场景：节点级为全处理/全不处理，双稳健为半数邻居处理下的 ego 1/0"""
    g = ds.graph
    if cfg.experiment == "dr":
        treated, control = balanced_de_pair(g, target)
        return {"treated": treated, "control": control}
    return {"treated": all_treated(g, target), "control": none_treated(g, target)}


def simulate_replication(cfg: SimConfig, rep: int, graph: Optional[Graph] = None,
                         z: Optional[np.ndarray] = None) -> dict:
    """
    生成第 rep 个重复

    Returns:
        {"rep", "seed", "dataset", "z", "target", "scenarios", "truths"}
    """
    seed = task_seed(cfg.seed, "rep", rep)
    if graph is None:
        graph, z = gen_latent_network(cfg.n, cfg.rho, cfg.beta, seed, cfg.box)
    world = world_for(cfg)
    ds = world.generate(graph, seed)
    target = select_target(z) if z is not None else 0
    scenarios = target_scenarios(ds, cfg, target)
    truths = {name: world.true_theta(graph, sc) for name, sc in scenarios.items()}
    if cfg.experiment == "ate":
        treated, control, ate = world.population_means(graph)
        truths.update(population_treated=treated, population_control=control, population_ate=ate)
    return {"rep": rep, "seed": seed, "dataset": ds, "z": z, "target": target,
            "scenarios": scenarios, "truths": truths}


def write_simulation(out: Union[str, Path], cfg: SimConfig, replications: List[dict],
                     command: str = "simulate") -> Path:
    """每个重复写入 rep_XXX/{nodes,edges,latent}.csv 与场景 JSON，根目录写 manifest.json"""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    reps_meta = []
    for rec in replications:
        rep_dir = out / f"rep_{rec['rep']:03d}"
        ds = rec["dataset"]
        write_dataset(ds, rep_dir / "nodes.csv", rep_dir / "edges.csv")
        if rec["z"] is not None:
            pd.DataFrame({"id": ds.ids, "z1": rec["z"][:, 0], "z2": rec["z"][:, 1]}).to_csv(
                rep_dir / "latent.csv", index=False, float_format="%.17g"
            )
        for name, sc in rec["scenarios"].items():
            write_scenario(sc, rep_dir / f"scenario_{name}.json", ds.ids)
        reps_meta.append({
            "rep": rec["rep"], "seed": rec["seed"], "dir": rep_dir.name,
            "target": ds.ids[rec["target"]], "truths": rec["truths"],
        })
    manifest = {
        "command": command,
        "version": settings.VERSION,
        "config": cfg.model_dump(),
        "replications": reps_meta,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    logger.info("模拟数据写入 %s: %s 个重复", out, len(replications))
    return out
