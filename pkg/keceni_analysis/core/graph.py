"""
网络结构模块
无向简单图的存储与邻域查询 (闭邻域、k 跳邻域、依赖指示)
节点编号为 0..n-1 的稠密整数，外部字符串编号在 data/loader.py 中映射
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from keceni_analysis.core.errors import KeceniInputError

logger = logging.getLogger(__name__)


class Graph:
    """不可变无向图，邻接表为每个节点排好序的邻居数组"""

    def __init__(self, n: int, adjacency: Sequence[np.ndarray]):
        self.n = int(n)
        self.adjacency: Tuple[np.ndarray, ...] = tuple(
            np.asarray(a, dtype=np.int64) for a in adjacency
        )
        for a in self.adjacency:
            a.setflags(write=False)

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.n_edges})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph) or other.n != self.n:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.adjacency, other.adjacency))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return int(self.degree.sum() // 2)

    def neighbors(self, i: int) -> np.ndarray:
        self._check(i)
        return self.adjacency[i]

    def edges(self) -> np.ndarray:
        """(m, 2) 数组，每条边只出现一次且 src < dst"""
        rows = [
            np.column_stack([np.full(np.sum(a > i), i), a[a > i]])
            for i, a in enumerate(self.adjacency)
        ]
        if not rows:
            return np.zeros((0, 2), dtype=np.int64)
        return np.vstack(rows).astype(np.int64)

    def subgraph(self, nodes: Iterable[int]) -> Tuple["Graph", np.ndarray]:
        """诱导子图，保留节点按原编号升序重新编号；返回 (子图, 原编号)"""
        kept = np.unique(np.asarray(list(nodes), dtype=np.int64))
        if kept.size and (kept[0] < 0 or kept[-1] >= self.n):
            raise KeceniInputError("subgraph node id out of range")
        new_id = np.full(self.n, -1, dtype=np.int64)
        new_id[kept] = np.arange(kept.size)
        adjacency = []
        for old in kept:
            mapped = new_id[self.adjacency[old]]
            adjacency.append(np.sort(mapped[mapped >= 0]))
        return Graph(kept.size, adjacency), kept

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """perm[i] 为旧节点 i 的新编号"""
        perm = np.asarray(perm, dtype=np.int64)
        if perm.shape != (self.n,) or not np.array_equal(np.sort(perm), np.arange(self.n)):
            raise KeceniInputError("relabel requires a permutation of 0..n-1")
        adjacency: List[np.ndarray] = [np.empty(0, dtype=np.int64)] * self.n
        for old, a in enumerate(self.adjacency):
            adjacency[perm[old]] = np.sort(perm[a])
        return Graph(self.n, adjacency)

    def to_sparse(self) -> sparse.csr_matrix:
        e = self.edges()
        data = np.ones(2 * len(e), dtype=np.int8)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def _check(self, i: int):
        if not 0 <= int(i) < self.n:
            raise KeceniInputError(f"node id {i} out of range for graph with n={self.n}")


def build_graph(n: int, edges: Iterable[Tuple[int, int]]) -> Graph:
    """由边列表构造对称、去重的邻接表；自环静默丢弃"""
    if n < 0:
        raise KeceniInputError("node count must be non-negative")
    e = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise KeceniInputError(f"edge ({bad[0]}, {bad[1]}) references a node outside 0..{n - 1}")
    e = e[e[:, 0] != e[:, 1]]
    both = np.vstack([e, e[:, ::-1]]) if e.size else e
    both = np.unique(both, axis=0) if both.size else both

    adjacency = [np.empty(0, dtype=np.int64) for _ in range(n)]
    if both.size:
        starts = np.searchsorted(both[:, 0], np.arange(n + 1))
        for i in range(n):
            adjacency[i] = both[starts[i]:starts[i + 1], 1].copy()
    return Graph(n, adjacency)


def closed_neighborhood(g: Graph, i: int) -> np.ndarray:
    g._check(i)
    return np.union1d(g.adjacency[i], [i]).astype(np.int64)


def k_hop(g: Graph, i: int, k: int) -> np.ndarray:
    """k 跳闭邻域，逐层扩展前沿"""
    g._check(i)
    if k < 0:
        raise KeceniInputError("hop count must be non-negative")
    visited = np.zeros(g.n, dtype=bool)
    visited[i] = True
    frontier = np.array([i], dtype=np.int64)
    for _ in range(k):
        if frontier.size == 0:
            break
        nxt = np.concatenate([g.adjacency[v] for v in frontier])
        nxt = np.unique(nxt[~visited[nxt]])
        visited[nxt] = True
        frontier = nxt
    return np.flatnonzero(visited)


def dependence_indicator(g: Graph, i: int, j: int, radius: int) -> bool:
    """图距离 <= radius 时为真"""
    g._check(j)
    if i == j:
        g._check(i)
        return True
    return bool(np.isin(j, k_hop(g, i, radius)))


def hop_reach_matrix(g: Graph, radius: int) -> sparse.csr_matrix:
    """布尔稀疏矩阵 H, H[i, j] = 1 当且仅当 dist(i, j) <= radius"""
    if radius < 0:
        raise KeceniInputError("radius must be non-negative")
    step = (g.to_sparse() + sparse.identity(g.n, dtype=np.int8, format="csr")).astype(bool)
    reach = sparse.identity(g.n, dtype=bool, format="csr")
    for _ in range(radius):
        reach = (reach @ step).astype(bool)
    return reach.tocsr()


@dataclass
class LocalView:
    """
    单个节点的局部视图
    ball: 支撑集 N_i^{(hops)} (升序)，所有局部协变量张量都按 ball 排列
    nbhd: 闭邻域 N_i，treatment 向量按 nbhd 排列
    """
    node: int
    ball: np.ndarray
    nbhd: np.ndarray
    ego_in_nbhd: int
    ego_in_ball: int
    nbhd_in_ball: np.ndarray
    _graph: Graph = field(repr=False)
    _avg_cache: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return int(self.ball.size)

    @property
    def k(self) -> int:
        return int(self.nbhd.size)

    def treatment_avg_weights(self) -> np.ndarray:
        """Avg(t_{N_i \\ i}) 在 nbhd 上的权重；孤立节点全 0"""
        w = np.zeros(self.k)
        if self.k > 1:
            w[:] = 1.0 / (self.k - 1)
            w[self.ego_in_nbhd] = 0.0
        return w

    def ego_avg_weights(self, hops: int) -> np.ndarray:
        """Avg(x_{N_i^{(hops)} \\ i}) 在 ball 上的权重"""
        key = ("ego", hops)
        if key not in self._avg_cache:
            self._avg_cache[key] = self._avg_row(self.node, hops)
        return self._avg_cache[key]

    def member_avg_weights(self, hops: int) -> np.ndarray:
        """(k, size) 矩阵，第 r 行为 nbhd[r] 的 Avg(x_{N_j^{(hops)} \\ j}) 权重"""
        key = ("member", hops)
        if key not in self._avg_cache:
            self._avg_cache[key] = np.vstack([self._avg_row(j, hops) for j in self.nbhd])
        return self._avg_cache[key]

    def _avg_row(self, j: int, hops: int) -> np.ndarray:
        members = k_hop(self._graph, j, hops)
        members = members[members != j]
        w = np.zeros(self.size)
        if members.size:
            pos = np.searchsorted(self.ball, members)
            if np.any(pos >= self.size) or np.any(self.ball[np.minimum(pos, self.size - 1)] != members):
                raise KeceniInputError(
                    f"neighborhood of node {j} is not covered by the support of node {self.node}; "
                    f"increase the support hop count"
                )
            w[pos] = 1.0 / members.size
        return w


class NeighborhoodIndex:
    """按需构建并缓存每个节点的 LocalView"""

    def __init__(self, graph: Graph, hops: int = 2):
        if hops < 1:
            raise KeceniInputError("support hop count must be at least 1")
        self.graph = graph
        self.hops = int(hops)
        self._views: Dict[int, LocalView] = {}

    def view(self, i: int) -> LocalView:
        v = self._views.get(i)
        if v is None:
            g = self.graph
            ball = k_hop(g, i, self.hops)
            nbhd = closed_neighborhood(g, i)
            v = LocalView(
                node=int(i),
                ball=ball,
                nbhd=nbhd,
                ego_in_nbhd=int(np.searchsorted(nbhd, i)),
                ego_in_ball=int(np.searchsorted(ball, i)),
                nbhd_in_ball=np.searchsorted(ball, nbhd),
                _graph=g,
            )
            self._views[i] = v
        return v

    def views(self, nodes: Optional[Iterable[int]] = None) -> List[LocalView]:
        nodes = range(self.graph.n) if nodes is None else nodes
        return [self.view(int(i)) for i in nodes]
