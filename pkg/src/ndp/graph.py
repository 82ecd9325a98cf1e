"""Growing graph shared by both developmental programs.

Nodes are never deleted; ids are dense and assigned in creation order.
Edges live in a dict keyed by ``(src, dst)``; undirected graphs store the
key with ``src < dst``.
"""
from __future__ import annotations

import copy
import heapq
import json
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path


class StructureError(ValueError):
    """Raised when a mutation would break a graph invariant."""


class ModeError(StructureError):
    """Raised when an operation is not defined for the graph's mode."""


class MetricError(ValueError):
    """Raised when a topological metric is undefined for the given graph."""


class NodeRole(Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"
    CRITIC = "critic"


class GraphMode(Enum):
    UNDIRECTED = "undirected"
    DAG = "dag"


_DOT_COLORS = {
    NodeRole.INPUT: "red",
    NodeRole.HIDDEN: "white",
    NodeRole.OUTPUT: "blue",
    NodeRole.CRITIC: "gray",
}


class DevGraph:
    """Mutable graph of embedded nodes with weighted edges."""

    def __init__(self, mode: GraphMode = GraphMode.UNDIRECTED, embedding_dim: int | None = None):
        self.mode = mode
        self.embedding_dim = embedding_dim
        self.roles: list[NodeRole] = []
        self._emb: list[np.ndarray] = []
        self.edges: dict[tuple[int, int], float] = {}
        self._succ: list[set[int]] = []
        self._pred: list[set[int]] = []
        self.activations = np.zeros(0)

    # ------------------------------------------------------------------ nodes
    @property
    def num_nodes(self) -> int:
        return len(self.roles)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def directed(self) -> bool:
        return self.mode is GraphMode.DAG

    @property
    def embeddings(self) -> np.ndarray:
        if not self._emb:
            return np.zeros((0, self.embedding_dim or 0))
        return np.stack(self._emb)

    def embedding(self, node: int) -> np.ndarray:
        return self._emb[node]

    def set_embeddings(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.num_nodes, self.embedding_dim):
            raise StructureError(
                f"embedding matrix shape {values.shape} does not match "
                f"({self.num_nodes}, {self.embedding_dim})"
            )
        self._emb = [row.copy() for row in values]

    def add_node(self, role: NodeRole, embedding) -> int:
        emb = np.array(embedding, dtype=float).reshape(-1)
        if self.embedding_dim is None:
            self.embedding_dim = emb.size
        elif emb.size != self.embedding_dim:
            raise StructureError(
                f"embedding dimension {emb.size} does not match graph dimension {self.embedding_dim}"
            )
        node = len(self.roles)
        self.roles.append(role)
        self._emb.append(emb)
        self._succ.append(set())
        self._pred.append(set())
        self.activations = np.append(self.activations, 0.0)
        return node

    def nodes_with_role(self, role: NodeRole) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r is role]

    # ------------------------------------------------------------------ edges
    def _key(self, src: int, dst: int) -> tuple[int, int]:
        if self.directed:
            return (src, dst)
        return (src, dst) if src < dst else (dst, src)

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise StructureError(f"node {node} does not exist")

    def _reaches(self, start: int, target: int) -> bool:
        stack, seen = [start], {start}
        while stack:
            u = stack.pop()
            if u == target:
                return True
            for v in self._succ[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return False

    def add_edge(self, src: int, dst: int, weight: float = 1.0) -> None:
        self._check_node(src)
        self._check_node(dst)
        if src == dst:
            raise StructureError(f"self-loop on node {src}")
        key = self._key(src, dst)
        if key not in self.edges:
            if self.directed and self._reaches(dst, src):
                raise StructureError(f"edge {src}->{dst} would create a cycle")
            a, b = key
            self._succ[a].add(b)
            self._pred[b].add(a)
            if not self.directed:
                self._succ[b].add(a)
                self._pred[a].add(b)
        self.edges[key] = float(weight)

    def remove_edge(self, src: int, dst: int) -> None:
        key = self._key(src, dst)
        del self.edges[key]
        a, b = key
        self._succ[a].discard(b)
        self._pred[b].discard(a)
        if not self.directed:
            self._succ[b].discard(a)
            self._pred[a].discard(b)

    def has_edge(self, src: int, dst: int) -> bool:
        return self._key(src, dst) in self.edges

    def weight(self, src: int, dst: int) -> float:
        return self.edges[self._key(src, dst)]

    def neighbors(self, node: int) -> list[int]:
        """Sorted neighbours; for a DAG this is the union of predecessors and successors."""
        return sorted(self._succ[node] | self._pred[node])

    def predecessors(self, node: int) -> list[int]:
        return sorted(self._pred[node])

    def successors(self, node: int) -> list[int]:
        return sorted(self._succ[node])

    def degree(self, node: int) -> int:
        return len(self._succ[node] | self._pred[node])

    def adjacency(self, weighted: bool = True) -> np.ndarray:
        """Dense ``A[src, dst]``; symmetric for undirected graphs."""
        n = self.num_nodes
        a = np.zeros((n, n))
        for (s, d), w in self.edges.items():
            a[s, d] = w if weighted else 1.0
            if not self.directed:
                a[d, s] = a[s, d]
        return a

    def copy(self) -> "DevGraph":
        return copy.deepcopy(self)

    # ------------------------------------------------------------- structure
    def _undirected_lists(self) -> list[list[int]]:
        return [sorted(self._succ[v] | self._pred[v]) for v in range(self.num_nodes)]

    def components(self) -> list[list[int]]:
        adj = self._undirected_lists()
        seen = [False] * self.num_nodes
        comps = []
        for s in range(self.num_nodes):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [], deque([s])
            while queue:
                u = queue.popleft()
                comp.append(u)
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return self.num_nodes > 0 and len(self.components()) == 1

    def topological_order(self) -> list[int]:
        if not self.directed:
            raise ModeError("topological order is only defined for DAG graphs")
        indeg = [len(p) for p in self._pred]
        heap = [v for v in range(self.num_nodes) if indeg[v] == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            u = heapq.heappop(heap)
            order.append(u)
            for v in self._succ[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    heapq.heappush(heap, v)
        if len(order) != self.num_nodes:
            raise StructureError("graph contains a cycle")
        return order

    def to_json(self) -> str:
        data = {
            "nodes": [
                {"id": i, "role": r.value, "embedding": [float(x) for x in e]}
                for i, (r, e) in enumerate(zip(self.roles, self._emb))
            ],
            "edges": [{"src": s, "dst": d, "w": float(w)} for (s, d), w in sorted(self.edges.items())],
            "mode": self.mode.value,
        }
        return json.dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "DevGraph":
        data = json.loads(text)
        g = cls(GraphMode(data["mode"]))
        for node in sorted(data["nodes"], key=lambda n: n["id"]):
            g.add_node(NodeRole(node["role"]), node["embedding"])
        for e in data["edges"]:
            g.add_edge(e["src"], e["dst"], e["w"])
        return g


def diameter(g: DevGraph) -> int:
    """Hop diameter of the largest connected component (0 for a single node)."""
    if g.num_nodes == 0:
        raise StructureError("diameter of an empty graph")
    comps = g.components()
    size = max(len(c) for c in comps)
    best = 0
    for comp in comps:
        if len(comp) != size or size == 1:
            continue
        dist = _hop_distances(g, comp)
        best = max(best, int(dist.max()))
    return best


def _hop_distances(g: DevGraph, nodes: list[int]) -> np.ndarray:
    a = g.adjacency(weighted=False)[np.ix_(nodes, nodes)]
    if g.directed:
        a = np.maximum(a, a.T)
    return shortest_path(csr_matrix(a), method="D", unweighted=True, directed=False)


def topological_order(g: DevGraph) -> list[int]:
    return g.topological_order()


# ----------------------------------------------------------------- small world
@dataclass(frozen=True)
class SmallWorldReport:
    c: float
    l: float  # noqa: E741
    c_r: float
    l_r: float
    c_l: float
    sigma: float
    omega: float


def average_clustering(adj: np.ndarray) -> float:
    """Mean local clustering of a 0/1 symmetric adjacency; degree < 2 counts as 0."""
    a = (adj != 0).astype(float)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    tri = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    possible = deg * (deg - 1) / 2.0
    local = np.divide(tri, possible, out=np.zeros_like(tri), where=possible > 0)
    return float(local.mean())


def average_shortest_path(adj: np.ndarray) -> float:
    dist = shortest_path(csr_matrix(adj != 0), method="D", unweighted=True, directed=False)
    n = adj.shape[0]
    if np.isinf(dist).any():
        raise MetricError("graph is disconnected")
    return float(dist.sum() / (n * (n - 1)))


def ring_lattice(n: int, k: int) -> np.ndarray:
    """Ring where each node links to its ``k // 2`` nearest neighbours on each side."""
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(1, k // 2 + 1):
            a[i, (i + j) % n] = a[(i + j) % n, i] = 1.0
    return a


def random_gnm(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    iu = np.triu_indices(n, 1)
    pick = rng.choice(iu[0].size, size=m, replace=False)
    a = np.zeros((n, n))
    a[iu[0][pick], iu[1][pick]] = 1.0
    return a + a.T


def _is_connected(adj: np.ndarray) -> bool:
    dist = shortest_path(csr_matrix(adj), method="D", unweighted=True, directed=False, indices=0)
    return bool(np.isfinite(dist).all())


def lattice_degree(n: int, m: int) -> int:
    """Even degree nearest ``2m/n`` (halves round up), capped below ``n``."""
    k = 2 * int(np.floor(m / n + 0.5))
    k = min(k, n - 1 if (n - 1) % 2 == 0 else n - 2)
    return k


def small_world_metrics(g: DevGraph, n_random_refs: int = 10, rng_seed: int = 0,
                        max_attempts: int = 100) -> SmallWorldReport:
    n = g.num_nodes
    if n < 4:
        raise MetricError(f"need at least 4 nodes, got {n}")
    adj = g.adjacency(weighted=False)
    adj = np.maximum(adj, adj.T)
    m = int(np.triu(adj, 1).sum())
    if not _is_connected(adj):
        raise MetricError("graph is disconnected")
    c = average_clustering(adj)
    l = average_shortest_path(adj)  # noqa: E741

    rng = np.random.default_rng(rng_seed)
    crs, lrs = [], []
    for _ in range(n_random_refs):
        for _attempt in range(max_attempts):
            ref = random_gnm(n, m, rng)
            if _is_connected(ref):
                break
        else:
            raise MetricError(f"no connected random reference after {max_attempts} attempts")
        crs.append(average_clustering(ref))
        lrs.append(average_shortest_path(ref))
    c_r, l_r = float(np.mean(crs)), float(np.mean(lrs))

    k = lattice_degree(n, m)
    if k < 2:
        raise MetricError(f"lattice degree {k} is degenerate")
    c_l = average_clustering(ring_lattice(n, k))
    if c_r == 0.0 or c_l == 0.0:
        raise MetricError("reference clustering is zero")
    sigma = (c / c_r) / (l / l_r)
    omega = l_r / l - c / c_l
    return SmallWorldReport(c=c, l=l, c_r=c_r, l_r=l_r, c_l=c_l, sigma=sigma, omega=omega)


# ---------------------------------------------------------------------- export
def export_dot(g: DevGraph, name: str = "G") -> str:
    keyword, arrow = ("digraph", "->") if g.directed else ("graph", "--")
    lines = [f"{keyword} {name} {{"]
    for i, role in enumerate(g.roles):
        lines.append(f'  {i} [label="{i}", style=filled, fillcolor={_DOT_COLORS[role]}, role={role.value}];')
    for (s, d), w in sorted(g.edges.items()):
        lines.append(f'  {s} {arrow} {d} [label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
