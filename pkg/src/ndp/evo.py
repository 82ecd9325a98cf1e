"""Evolutionary developmental program: grows an undirected recurrent network.

One set of three small MLPs is shared by every node:

* a graph cellular automaton that updates each embedding from its own
  state and the mean of its neighbours' states,
* a replication model that decides which nodes spawn a child,
* a weight model that scores every node pair from the concatenated
  embeddings.

The genome is the flat vector of all MLP weights (plus, optionally, the
seed node's embedding), so its size never depends on the grown graph.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import ContractError
from .graph import DevGraph, GraphMode, NodeRole, diameter


@dataclass
class EvoDevConfig:
    cycles: int = 4
    pruning_threshold: float = 0.0
    embedding_dim: int = 4
    hidden: int = 8
    replication_hidden: int = 3
    weight_hidden: int = 3
    weighted: bool = True
    max_nodes: int = 128
    coevolve_seed: bool = True
    replication_threshold: float = 0.5
    exclude_io_pairs: bool = True
    all_pairs: bool = True
    aggregation: str = "mean"
    growth_noise: float = 0.0  # std of seeded noise added to child embeddings
    growth_seed: int = 0
    clamp_inputs: bool = True
    eval_steps: int = 0  # 0 means "use the grown graph's diameter"

    def validate(self, n_in: int | None = None, n_out: int | None = None) -> None:
        if self.cycles < 1:
            raise ContractError(f"cycles must be >= 1, got {self.cycles}")
        if self.aggregation not in ("sum", "mean"):
            raise ContractError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.growth_noise < 0:
            raise ContractError(f"growth_noise must be >= 0, got {self.growth_noise}")
        if min(self.embedding_dim, self.hidden, self.replication_hidden, self.weight_hidden) < 1:
            raise ContractError("layer sizes must be >= 1")
        if n_in is not None and n_out is not None and self.max_nodes < n_in + n_out:
            raise ContractError(f"max_nodes {self.max_nodes} < inputs + outputs ({n_in + n_out})")

    @classmethod
    def from_dict(cls, data: dict) -> "EvoDevConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown dev keys: {sorted(unknown)}")
        return cls(**data)


def _layer_shapes(cfg: EvoDevConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, h, hr, hw = cfg.embedding_dim, cfg.hidden, cfg.replication_hidden, cfg.weight_hidden
    shapes = [
        ("gnca_w1", (2 * e, h)), ("gnca_b1", (h,)), ("gnca_w2", (h, e)), ("gnca_b2", (e,)),
        ("rep_w1", (e, hr)), ("rep_b1", (hr,)), ("rep_w2", (hr, 1)), ("rep_b2", (1,)),
        ("wt_w1", (2 * e, hw)), ("wt_b1", (hw,)), ("wt_w2", (hw, 1)), ("wt_b2", (1,)),
    ]
    if cfg.coevolve_seed:
        shapes.append(("seed_embedding", (e,)))
    return shapes


def param_count(cfg: EvoDevConfig) -> int:
    return int(sum(np.prod(shape) for _, shape in _layer_shapes(cfg)))


class NdpEvoParams:
    """Named views into one flat genome."""

    def __init__(self, cfg: EvoDevConfig, flat):
        flat = np.asarray(flat, dtype=float).reshape(-1)
        expected = param_count(cfg)
        if flat.size != expected:
            raise ContractError(f"genome has {flat.size} values, config needs {expected}")
        self.cfg = cfg
        self.flat = flat.copy()
        offset = 0
        for name, shape in _layer_shapes(cfg):
            size = int(np.prod(shape))
            setattr(self, name, self.flat[offset:offset + size].reshape(shape))
            offset += size
        if not cfg.coevolve_seed:
            self.seed_embedding = np.ones(cfg.embedding_dim)

    def pack(self) -> np.ndarray:
        return self.flat.copy()

    @classmethod
    def random(cls, cfg: EvoDevConfig, rng: np.random.Generator, scale: float = 1.0) -> "NdpEvoParams":
        return cls(cfg, rng.normal(0.0, scale, param_count(cfg)))

    def gnca(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.gnca_w1 + self.gnca_b1) @ self.gnca_w2 + self.gnca_b2

    def replication(self, x: np.ndarray) -> np.ndarray:
        z = np.tanh(x @ self.rep_w1 + self.rep_b1) @ self.rep_w2 + self.rep_b2
        return 1.0 / (1.0 + np.exp(-z[:, 0]))

    def weight(self, pairs: np.ndarray) -> np.ndarray:
        return np.tanh(np.tanh(pairs @ self.wt_w1 + self.wt_b1) @ self.wt_w2 + self.wt_b2)[:, 0]

    def to_json(self) -> str:
        return json.dumps({"config": asdict(self.cfg), "flat_params": self.flat.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NdpEvoParams":
        data = json.loads(text)
        return cls(EvoDevConfig.from_dict(data["config"]), data["flat_params"])


def unpack(cfg: EvoDevConfig, flat) -> NdpEvoParams:
    return NdpEvoParams(cfg, flat)


def pack(params: NdpEvoParams) -> np.ndarray:
    return params.pack()


# ------------------------------------------------------------------ development
def neighbor_term(g: DevGraph, x: np.ndarray, aggregation: str = "sum") -> np.ndarray:
    a = g.adjacency(weighted=False)
    if aggregation == "sum":
        return a @ x
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a @ x, deg, out=np.zeros_like(x), where=deg > 0)


def gnca_propagate(g: DevGraph, p: NdpEvoParams, steps: int, aggregation: str | None = None) -> None:
    """Synchronous embedding updates from (own state, aggregated neighbour states)."""
    if steps <= 0 or g.num_nodes == 0:
        return
    aggregation = aggregation or p.cfg.aggregation
    x = g.embeddings
    for _ in range(steps):
        x = p.gnca(np.concatenate([x, neighbor_term(g, x, aggregation)], axis=1))
    g.set_embeddings(x)


def replicate(g: DevGraph, p: NdpEvoParams, threshold: float = 0.5, max_nodes: int | None = None,
              noise: float = 0.0, rng: np.random.Generator | None = None) -> int:
    """Add one child per firing node, wired to the parent and its neighbours.

    With ``noise > 0`` each child's embedding is offset by Gaussian noise from
    ``rng``; without it, twin nodes can never be told apart.
    """
    x = g.embeddings
    firing = np.flatnonzero(p.replication(x) > threshold)
    if max_nodes is not None:
        firing = firing[: max(0, max_nodes - g.num_nodes)]
    neighborhoods = {int(v): g.neighbors(int(v)) for v in firing}
    for v, nbrs in neighborhoods.items():
        family = [v] + nbrs
        emb = x[family].mean(axis=0)
        if noise > 0:
            emb = emb + noise * rng.standard_normal(emb.shape)
        child = g.add_node(NodeRole.HIDDEN, emb)
        for u in family:
            g.add_edge(child, u, 1.0)
    return len(firing)


def io_nodes(num_nodes: int, n_in: int, n_out: int) -> tuple[list[int], list[int]]:
    """Lowest ids become inputs and highest ids outputs once there are enough nodes."""
    if n_in + n_out == 0 or num_nodes < n_in + n_out:
        return [], []
    return list(range(n_in)), list(range(num_nodes - n_out, num_nodes))


def update_weights(g: DevGraph, p: NdpEvoParams, n_in: int = 0, n_out: int = 0,
                   exclude_io_pairs: bool = True, all_pairs: bool = True) -> None:
    n = g.num_nodes
    if n < 2:
        return
    a, b = np.triu_indices(n, 1)
    x = g.embeddings
    ab = np.concatenate([x[a], x[b]], axis=1)
    ba = np.concatenate([x[b], x[a]], axis=1)
    w = 0.5 * (p.weight(ab) + p.weight(ba))
    inputs, outputs = io_nodes(n, n_in, n_out) if exclude_io_pairs else ([], [])
    role = np.zeros(n, dtype=int)
    role[inputs] = 1
    role[outputs] = 2
    same_io = (role[a] == role[b]) & (role[a] != 0)
    for i, j, wij, blocked in zip(a.tolist(), b.tolist(), w.tolist(), same_io.tolist()):
        if (blocked or not all_pairs) and not g.has_edge(i, j):
            continue
        g.add_edge(i, j, wij)


def prune(g: DevGraph, threshold: float) -> int:
    doomed = [key for key, w in g.edges.items() if abs(w) < threshold]
    for s, d in doomed:
        g.remove_edge(s, d)
    return len(doomed)


def develop(p: NdpEvoParams, cfg: EvoDevConfig, n_in: int, n_out: int,
            trace: list | None = None) -> tuple[DevGraph, bool]:
    """Grow a graph from a single seed node; returns ``(graph, viable)``.

    When ``trace`` is a list, a copy of the graph is appended after every cycle.
    """
    if n_in < 1 or n_out < 1:
        raise ContractError("a task needs at least one input and one output")
    g = DevGraph(GraphMode.UNDIRECTED, cfg.embedding_dim)
    g.add_node(NodeRole.HIDDEN, p.seed_embedding)
    if trace is not None:
        trace.append(g.copy())
    rng = np.random.default_rng(cfg.growth_seed)
    for _ in range(cfg.cycles):
        gnca_propagate(g, p, max(1, diameter(g)))
        replicate(g, p, cfg.replication_threshold, cfg.max_nodes, cfg.growth_noise, rng)
        if cfg.weighted:
            update_weights(g, p, n_in, n_out, cfg.exclude_io_pairs, cfg.all_pairs)
        if cfg.pruning_threshold > 0:
            prune(g, cfg.pruning_threshold)
        if trace is not None:
            trace.append(g.copy())
    viable = g.num_nodes >= n_in + n_out
    if viable:
        inputs, outputs = io_nodes(g.num_nodes, n_in, n_out)
        for i in inputs:
            g.roles[i] = NodeRole.INPUT
        for o in outputs:
            g.roles[o] = NodeRole.OUTPUT
        if trace is not None:
            trace[-1] = g.copy()
    return g, viable


# ------------------------------------------------------------------- evaluation
class RecurrentPolicy:
    """Scalar-activation readout of a grown undirected graph, batched over observations."""

    def __init__(self, g: DevGraph, prop_steps: int | None = None, clamp_inputs: bool = True):
        self.inputs = np.array(g.nodes_with_role(NodeRole.INPUT), dtype=int)
        self.outputs = np.array(g.nodes_with_role(NodeRole.OUTPUT), dtype=int)
        if self.inputs.size == 0 or self.outputs.size == 0:
            raise ContractError("graph has no input or output nodes (nonviable)")
        self.weights = g.adjacency(weighted=True)
        self.steps = diameter(g) if not prop_steps else int(prop_steps)
        self.clamp_inputs = clamp_inputs
        self.n_nodes = g.num_nodes

    @property
    def n_in(self) -> int:
        return self.inputs.size

    @property
    def n_out(self) -> int:
        return self.outputs.size

    def activations(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.n_in:
            raise ContractError(f"observation length {obs.shape[1]} != input count {self.n_in}")
        a = np.zeros((obs.shape[0], self.n_nodes))
        a[:, self.inputs] = obs
        for _ in range(self.steps):
            a = np.tanh(a @ self.weights)
            if self.clamp_inputs:
                a[:, self.inputs] = obs
        return a[0] if single else a

    def __call__(self, obs) -> np.ndarray:
        a = self.activations(obs)
        return a[..., self.outputs]


def evaluate_recurrent(g: DevGraph, obs, prop_steps: int | None = None, clamp_inputs: bool = True) -> np.ndarray:
    policy = RecurrentPolicy(g, prop_steps, clamp_inputs)
    a = policy.activations(np.asarray(obs, dtype=float).reshape(-1))
    g.activations = a
    return a[policy.outputs]
