"""
数据读写模块
节点表 id,y,t,x1..xp 与边表 src,dst (CSV, UTF-8)；场景为 JSON
读入时统一列名、检查取值并生成质量报告
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from keceni_analysis.core.errors import KeceniInputError, ScenarioError
from keceni_analysis.core.graph import Graph, build_graph
from keceni_analysis.core.models import Dataset, TreatmentScenario

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NODE_COLUMN_MAP = {
    "node": "id",
    "name": "id",
    "outcome": "y",
    "treatment": "t",
}

EDGE_COLUMN_MAP = {
    "source": "src",
    "target": "dst",
    "from": "src",
    "to": "dst",
}


def _normalize_columns(df: pd.DataFrame, mapping: Dict[str, str]) -> pd.DataFrame:
    renamed = {c: mapping.get(str(c).strip().lower(), str(c).strip()) for c in df.columns}
    return df.rename(columns=renamed)


def _sorted_ids(ids: List[str]) -> List[str]:
    """全部为整数时按数值排序，否则按字符串排序"""
    try:
        return sorted(ids, key=lambda s: int(s))
    except ValueError:
        return sorted(ids)


class DatasetCleaner:
    """节点/边表的校验与整理，问题记录在 quality_issues"""

    def __init__(self):
        self.quality_issues: List[dict] = []

    def clean_nodes(self, df: pd.DataFrame) -> pd.DataFrame:
        df = _normalize_columns(df, NODE_COLUMN_MAP)
        for col in ("id", "t"):
            if col not in df.columns:
                raise KeceniInputError(f"node file is missing column '{col}'")
        if "y" not in df.columns:
            df["y"] = np.nan
        df["id"] = df["id"].astype(str).str.strip()
        dup = df["id"].duplicated()
        if dup.any():
            raise KeceniInputError(f"duplicate node id(s): {df.loc[dup, 'id'].head(5).tolist()}")

        t = pd.to_numeric(df["t"], errors="coerce")
        if t.isna().any() or not t.isin([0, 1]).all():
            raise KeceniInputError("treatment must be 0/1")
        df["t"] = t.astype(np.int64)

        y = pd.to_numeric(df["y"], errors="coerce")
        bad_y = df["y"].notna() & y.isna()
        if bad_y.any():
            raise KeceniInputError(f"outcome is not numeric (node ids {df.loc[bad_y, 'id'].head(5).tolist()})")
        df["y"] = y
        missing_y = int(df["y"].isna().sum())
        if missing_y:
            self.quality_issues.append({"type": "y_missing", "count": missing_y})

        xcols = self.covariate_columns(df)
        if not xcols:
            raise KeceniInputError("node file has no covariate columns x1..xp")
        for c in xcols:
            df[c] = pd.to_numeric(df[c], errors="coerce")
        if df[xcols].isna().any().any():
            bad = df.loc[df[xcols].isna().any(axis=1), "id"].head(5).tolist()
            raise KeceniInputError(f"covariates contain NaN (node ids {bad})")
        return df

    @staticmethod
    def covariate_columns(df: pd.DataFrame) -> List[str]:
        cols = [c for c in df.columns if c not in ("id", "y", "t")]
        return sorted(cols, key=lambda c: (len(c), c)) if all(c[:1] == "x" for c in cols) else cols

    def clean_edges(self, df: pd.DataFrame, index: Dict[str, int]) -> np.ndarray:
        df = _normalize_columns(df, EDGE_COLUMN_MAP)
        for col in ("src", "dst"):
            if col not in df.columns:
                raise KeceniInputError(f"edge file is missing column '{col}'")
        src = df["src"].astype(str).str.strip()
        dst = df["dst"].astype(str).str.strip()
        unknown = sorted((set(src) | set(dst)) - set(index))
        if unknown:
            raise KeceniInputError(f"edge file references unknown node id(s): {unknown[:5]}")
        pairs = np.column_stack([src.map(index).to_numpy(), dst.map(index).to_numpy()]).astype(np.int64)

        loops = int(np.sum(pairs[:, 0] == pairs[:, 1])) if len(pairs) else 0
        if loops:
            self.quality_issues.append({"type": "self_loops_dropped", "count": loops})
        if len(pairs):
            canon = np.sort(pairs[pairs[:, 0] != pairs[:, 1]], axis=1)
            dups = len(canon) - len(np.unique(canon, axis=0))
            if dups:
                self.quality_issues.append({"type": "duplicate_edges", "count": int(dups)})
        return pairs

    def report(self, ds: Dataset) -> dict:
        counts = {issue["type"]: issue["count"] for issue in self.quality_issues}
        return {
            "n": ds.n,
            "p": ds.p,
            "n_edges": ds.graph.n_edges,
            "duplicate_edges": counts.get("duplicate_edges", 0),
            "self_loops_dropped": counts.get("self_loops_dropped", 0),
            "missing_y": counts.get("y_missing", 0),
            "issues": list(self.quality_issues),
        }


def load_dataset(node_csv: PathLike, edge_csv: PathLike, with_report: bool = False
                 ) -> Union[Dataset, Tuple[Dataset, dict]]:
    """
    读入节点表与边表，节点编号重映射为 0..n-1 (按 id 排序)

    Returns:
        Dataset；with_report=True 时返回 (Dataset, 质量报告)
    """
    node_csv, edge_csv = Path(node_csv), Path(edge_csv)
    for path in (node_csv, edge_csv):
        if not path.exists():
            raise KeceniInputError(f"file not found: {path}")
    cleaner = DatasetCleaner()
    nodes = cleaner.clean_nodes(pd.read_csv(node_csv, dtype=str, encoding="utf-8"))
    ids = _sorted_ids(nodes["id"].tolist())
    index = {k: i for i, k in enumerate(ids)}
    nodes = nodes.set_index("id").loc[ids].reset_index()

    edges_df = pd.read_csv(edge_csv, dtype=str, encoding="utf-8")
    pairs = cleaner.clean_edges(edges_df, index)
    graph = build_graph(len(ids), pairs)

    xcols = cleaner.covariate_columns(nodes)
    flags = ["y_missing"] if nodes["y"].isna().any() else []
    ds = Dataset(
        graph=graph,
        y=nodes["y"].to_numpy(dtype=float),
        t=nodes["t"].to_numpy(),
        x=nodes[xcols].to_numpy(dtype=float),
        ids=ids,
        covariate_names=list(xcols),
        quality_flags=flags,
    )
    report = cleaner.report(ds)
    logger.info("数据读入: n=%s, 边=%s, p=%s, 缺失 y=%s", ds.n, graph.n_edges, ds.p, report["missing_y"])
    return (ds, report) if with_report else ds


def load_scenario(path: PathLike, g: Graph, ids: Optional[List[str]] = None) -> TreatmentScenario:
    """
    读入场景 JSON；ids 为数据集的 id 列表 (省略时 id 即整数节点编号)
    """
    path = Path(path)
    if not path.exists():
        raise KeceniInputError(f"file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {e}") from e
    return scenario_from_dict(raw, g, ids)


def scenario_from_dict(raw: dict, g: Graph, ids: Optional[List[str]] = None) -> TreatmentScenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a JSON object")
    if "target" not in raw or "assignment" not in raw:
        raise ScenarioError("scenario needs 'target' and 'assignment'")
    if not isinstance(raw["assignment"], dict):
        raise ScenarioError("scenario 'assignment' must be an object mapping node id to 0/1")
    index = {k: i for i, k in enumerate(ids)} if ids is not None else None

    def dense(key) -> int:
        key = str(key).strip()
        if index is not None:
            if key not in index:
                raise ScenarioError(f"scenario references unknown node id '{key}'")
            return index[key]
        try:
            return int(key)
        except ValueError:
            raise ScenarioError(f"node id '{key}' is not an integer and no id map was given")

    assignment = {}
    for k, v in raw["assignment"].items():
        if v not in (0, 1) or isinstance(v, bool):
            raise ScenarioError(f"assignment value for node {k} must be 0 or 1, got {v!r}")
        assignment[dense(k)] = int(v)
    sc = TreatmentScenario(target=dense(raw["target"]), assignment=assignment, label=str(raw.get("label", "")))
    return sc.validate_on(g)


def write_dataset(ds: Dataset, node_csv: PathLike, edge_csv: PathLike):
    """规范排序后写出：节点按 id 排序，边按 (src, dst) 排序且 src < dst"""
    nodes = pd.DataFrame({"id": ds.ids, "y": ds.y, "t": ds.t})
    for k, name in enumerate(ds.covariate_names):
        nodes[name] = ds.x[:, k]
    position = {k: i for i, k in enumerate(ds.ids)}
    order = [position[k] for k in _sorted_ids(list(ds.ids))]
    nodes = nodes.iloc[order]
    Path(node_csv).parent.mkdir(parents=True, exist_ok=True)
    nodes.to_csv(node_csv, index=False, encoding="utf-8", float_format="%.17g")

    e = ds.graph.edges()
    ids = np.asarray(ds.ids, dtype=object)
    edges = pd.DataFrame({"src": ids[e[:, 0]] if len(e) else [], "dst": ids[e[:, 1]] if len(e) else []})
    Path(edge_csv).parent.mkdir(parents=True, exist_ok=True)
    edges.to_csv(edge_csv, index=False, encoding="utf-8")


def write_scenario(sc: TreatmentScenario, path: PathLike, ids: Optional[List[str]] = None):
    name = (lambda i: ids[i]) if ids is not None else str
    data = {
        "target": name(sc.target),
        "assignment": {name(k): int(v) for k, v in sorted(sc.assignment.items())},
    }
    if sc.label:
        data["label"] = sc.label
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
