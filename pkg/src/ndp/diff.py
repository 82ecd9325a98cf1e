"""Differentiable developmental program: grows a feedforward DAG on the autodiff tape.

Growth starts from a fully connected input->output seed. Each growth step
runs one graph-convolution message pass over the node embeddings; every
other step a parent is sampled from replication probabilities, a child is
produced by the perturbation network, and the child is wired parent->child
and child->(a node deeper in the network). After growth an edge MLP
predicts every edge weight from (source, destination) embeddings.

Embedding channel 0 is the node bias, channel 1 selects its activation,
and the remaining channels are free developmental state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, SamplingError, Tape, Tensor
from .graph import DevGraph, GraphMode, NodeRole

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class DiffDevConfig:
    growth_steps: int = 48
    embedding_dim: int = 8
    n_in: int = 4
    n_out: int = 2
    critic: bool = False
    activation_set: tuple = ACTIVATIONS
    conv_hidden: int = 32
    edge_hidden: int = 32
    perturb_hidden: int = 16
    init_scale: float = 1.0
    residual: bool = True
    linear_readout: bool = True

    def __post_init__(self):
        self.activation_set = tuple(self.activation_set)

    def validate(self) -> None:
        if self.growth_steps < 0:
            raise ContractError(f"growth_steps must be >= 0, got {self.growth_steps}")
        if self.embedding_dim < 3:
            raise ContractError(f"embedding_dim must be >= 3, got {self.embedding_dim}")
        if self.n_in < 1 or self.n_out < 1:
            raise ContractError("need at least one input and one output")
        if len(self.activation_set) != 3 or set(self.activation_set) - set(ACTIVATIONS):
            raise ContractError(f"activation_set must order three of {ACTIVATIONS}")

    @property
    def n_seed(self) -> int:
        return self.n_in + self.n_out + int(self.critic)

    @classmethod
    def from_dict(cls, data: dict) -> "DiffDevConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown dev keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation_set"] = list(self.activation_set)
        return d


def param_shapes(cfg: DiffDevConfig) -> list[tuple[str, tuple[int, int]]]:
    e, c, he, hp = cfg.embedding_dim, cfg.conv_hidden, cfg.edge_hidden, cfg.perturb_hidden
    return [
        ("seed_embeddings", (cfg.n_seed, e)),
        ("mp_self", (e, c)), ("mp_nbr", (e, c)), ("mp_bias", (1, c)),
        ("mp_out", (c, e)), ("mp_out_bias", (1, e)),
        ("rep_self", (e, 1)), ("rep_nbr", (e, 1)), ("rep_bias", (1, 1)),
        ("perturb_w1", (e, hp)), ("perturb_b1", (1, hp)), ("perturb_w2", (hp, e)), ("perturb_b2", (1, e)),
        ("edge_w1", (2 * e, he)), ("edge_b1", (1, he)), ("edge_w2", (he, 1)), ("edge_b2", (1, 1)),
    ]


class NdpDiffParams:
    """Ordered dict of trainable arrays."""

    def __init__(self, cfg: DiffDevConfig, arrays: dict[str, np.ndarray]):
        self.cfg = cfg
        self.arrays = {}
        for name, shape in param_shapes(cfg):
            arr = np.array(arrays[name], dtype=float)
            if arr.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr

    @classmethod
    def init(cls, cfg: DiffDevConfig, rng: np.random.Generator) -> "NdpDiffParams":
        arrays = {}
        for name, shape in param_shapes(cfg):
            if name == "seed_embeddings":
                arrays[name] = rng.normal(0.0, cfg.init_scale, shape)
            elif "bias" in name or name.endswith(("_b1", "_b2")):
                arrays[name] = np.zeros(shape)
            elif name == "mp_out" and cfg.residual:
                # a zero residual branch starts growth as the identity map; training learns the update
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, cfg.init_scale / np.sqrt(shape[0]), shape)
        return cls(cfg, arrays)

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def pack(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    @classmethod
    def unpack(cls, cfg: DiffDevConfig, flat) -> "NdpDiffParams":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        expected = param_count(cfg)
        if flat.size != expected:
            raise ContractError(f"flat vector has {flat.size} values, config needs {expected}")
        arrays, offset = {}, 0
        for name, shape in param_shapes(cfg):
            size = shape[0] * shape[1]
            arrays[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return cls(cfg, arrays)

    def copy(self) -> "NdpDiffParams":
        return NdpDiffParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.leaf(arr, name=name) for name, arr in self.arrays.items()}

    def to_json(self, rng_state=None) -> str:
        return json.dumps({"config": self.cfg.to_dict(), "flat_params": self.pack().tolist(),
                           "rng_state": rng_state})

    @classmethod
    def from_json(cls, text: str) -> "NdpDiffParams":
        data = json.loads(text)
        return cls.unpack(DiffDevConfig.from_dict(data["config"]), data["flat_params"])


def param_count(cfg: DiffDevConfig) -> int:
    return int(sum(r * c for _, (r, c) in param_shapes(cfg)))


# ---------------------------------------------------------------------- growth
@dataclass
class GrownNetwork:
    graph: DevGraph
    embeddings: Tensor
    edge_list: list[tuple[int, int]]
    edge_weights: Tensor | None
    choices: list[tuple[int, int]] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)

    @property
    def tape(self) -> Tape:
        return self.embeddings.tape


def seed_graph(cfg: DiffDevConfig, seed_values: np.ndarray | None = None) -> DevGraph:
    """Inputs fully connected to outputs (and to the critic when enabled)."""
    if seed_values is None:
        seed_values = np.zeros((cfg.n_seed, cfg.embedding_dim))
    g = DevGraph(GraphMode.DAG, cfg.embedding_dim)
    roles = [NodeRole.INPUT] * cfg.n_in + [NodeRole.OUTPUT] * cfg.n_out + [NodeRole.CRITIC] * int(cfg.critic)
    for role, emb in zip(roles, seed_values):
        g.add_node(role, emb)
    inputs = range(cfg.n_in)
    for dst in range(cfg.n_in, cfg.n_seed):
        for src in inputs:
            g.add_edge(src, dst, 0.0)
    return g


def _edge_arrays(g: DevGraph) -> tuple[list[tuple[int, int]], np.ndarray, np.ndarray]:
    edges = sorted(g.edges)
    src = np.array([s for s, _ in edges], dtype=np.int64)
    dst = np.array([d for _, d in edges], dtype=np.int64)
    return edges, src, dst


def message_pass(g: DevGraph, x: Tensor, P: dict[str, Tensor], residual: bool = True) -> Tensor:
    """``tanh(W_self e_v + W_nbr sum_{u->v} e_u + b)`` followed by a linear map back to E.

    With ``residual`` the mapped message is added to the current embedding
    instead of replacing it.
    """
    _, src, dst = _edge_arrays(g)
    n = g.num_nodes
    pre = x @ P["mp_self"] + P["mp_bias"]
    if src.size:
        nbr = ad.scatter_add_rows(ad.gather_rows(x, src), dst, n)
        pre = pre + nbr @ P["mp_nbr"]
    update = ad.tanh(pre) @ P["mp_out"] + P["mp_out_bias"]
    return x + update if residual else update


def replication_logits(g: DevGraph, x: np.ndarray, arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Per-node replication logits from a separate graph convolution (plain values)."""
    _, src, dst = _edge_arrays(g)
    nbr = np.zeros_like(x)
    np.add.at(nbr, dst, x[src])
    return (x @ arrays["rep_self"] + nbr @ arrays["rep_nbr"] + arrays["rep_bias"])[:, 0]


def replication_probs(g: DevGraph, x: np.ndarray, arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Sigmoid per node, restricted to inputs and hidden nodes, normalized to sum 1."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * replication_logits(g, x, arrays)))
    mask = np.array([r in (NodeRole.INPUT, NodeRole.HIDDEN) for r in g.roles], dtype=float)
    p = sig * mask
    total = p.sum()
    if total <= 0:
        raise SamplingError("no node can replicate (all probabilities are zero)")
    return p / total


def destination_candidates(g: DevGraph, parent: int) -> list[int]:
    """Non-input nodes deeper than ``parent`` in topological order, plus every output/critic node."""
    order = g.topological_order()
    pos = {v: i for i, v in enumerate(order)}
    return sorted(
        v for v in range(g.num_nodes)
        if v != parent and g.roles[v] is not NodeRole.INPUT
        and (pos[v] > pos[parent] or g.roles[v] in (NodeRole.OUTPUT, NodeRole.CRITIC))
    )


def perturb(parent: Tensor, P: dict[str, Tensor]) -> Tensor:
    return ad.tanh(parent @ P["perturb_w1"] + P["perturb_b1"]) @ P["perturb_w2"] + P["perturb_b2"]


def grow_step(g: DevGraph, x: Tensor, P: dict[str, Tensor], rng: np.random.Generator,
              arrays: dict[str, np.ndarray] | None = None,
              replay: tuple[int, int] | None = None) -> tuple[Tensor, tuple[int, int]]:
    """Add one child node; returns the extended embedding tensor and ``(parent, destination)``."""
    if replay is None:
        arrays = arrays if arrays is not None else {k: v.value for k, v in P.items()}
        parent = ad.sample_categorical(replication_probs(g, x.value, arrays), rng)
        candidates = destination_candidates(g, parent)
        dest = candidates[int(rng.integers(len(candidates)))]
    else:
        parent, dest = replay
    child = perturb(ad.gather_rows(x, [parent]), P)
    x = ad.concat([x, child], axis=0)
    c = g.add_node(NodeRole.HIDDEN, child.value[0])
    g.add_edge(parent, c, 0.0)
    g.add_edge(c, dest, 0.0)
    return x, (parent, dest)


def predict_edges(g: DevGraph, x: Tensor, P: dict[str, Tensor]) -> tuple[list[tuple[int, int]], Tensor | None]:
    """``tanh(MLP(concat(e_src, e_dst)))`` for every existing edge, in sorted edge order."""
    edges, src, dst = _edge_arrays(g)
    if not edges:
        return edges, None
    pairs = ad.concat([ad.gather_rows(x, src), ad.gather_rows(x, dst)], axis=1)
    h = ad.tanh(pairs @ P["edge_w1"] + P["edge_b1"])
    return edges, ad.tanh(h @ P["edge_w2"] + P["edge_b2"])


def is_replication_step(i: int) -> bool:
    """Replication happens on every other growth step, starting with the second."""
    return i % 2 == 1


def develop_diff(params: NdpDiffParams, cfg: DiffDevConfig | None = None,
                 rng: np.random.Generator | None = None, tape: Tape | None = None,
                 replay: list[tuple[int, int]] | None = None, snapshots: list | None = None) -> GrownNetwork:
    """Grow a network for ``cfg.growth_steps`` steps.

    ``replay`` re-applies recorded ``(parent, destination)`` choices instead of
    sampling. ``snapshots`` (a list) receives a weighted graph copy after the
    seed and after every growth step.
    """
    cfg = cfg or params.cfg
    tape = tape or Tape()
    rng = rng if rng is not None else np.random.default_rng(0)
    P = params.leaves(tape)
    x = P["seed_embeddings"]
    if cfg.n_seed != x.value.shape[0]:
        raise ContractError(f"config seeds {cfg.n_seed} nodes, params carry {x.value.shape[0]}")
    g = seed_graph(cfg, x.value)
    if snapshots is not None:
        snapshots.append(_snapshot(g, x, P))
    choices: list[tuple[int, int]] = []
    replay_iter = iter(replay) if replay is not None else None
    for i in range(cfg.growth_steps):
        x = message_pass(g, x, P, cfg.residual)
        if is_replication_step(i):
            x, choice = grow_step(g, x, P, rng, params.arrays,
                                  next(replay_iter) if replay_iter is not None else None)
            choices.append(choice)
        if snapshots is not None:
            snapshots.append(_snapshot(g, x, P))
    # weights never feed back into growth, so predicting once at the end is equivalent
    edges, weights = predict_edges(g, x, P)
    g.set_embeddings(x.value)
    if weights is not None:
        for (s, d), w in zip(edges, weights.value[:, 0]):
            g.edges[(s, d)] = float(w)
    return GrownNetwork(g, x, edges, weights, choices, P)


def _snapshot(g: DevGraph, x: Tensor, P: dict[str, Tensor]) -> DevGraph:
    snap = g.copy()
    snap.set_embeddings(x.value)
    edges, w = predict_edges(g, x, P)
    if w is not None:
        for (s, d), wv in zip(edges, w.value[:, 0]):
            snap.edges[(s, d)] = float(wv)
    return snap


# --------------------------------------------------------------------- forward
def activation_index(selector: np.ndarray) -> np.ndarray:
    """Bin ``tanh(selector)`` at -1/3 and 1/3 into slots 0, 1, 2 of the activation set."""
    s = np.tanh(selector)
    return np.where(s < -1.0 / 3.0, 0, np.where(s <= 1.0 / 3.0, 1, 2))


def node_kinds(g: DevGraph, selector: np.ndarray, cfg: DiffDevConfig | None = None) -> np.ndarray:
    """Activation slot per node; with ``linear_readout`` output and critic nodes stay linear."""
    kinds = activation_index(selector)
    activation_set = cfg.activation_set if cfg else ACTIVATIONS
    if cfg is None or cfg.linear_readout:
        readout = [v for v, r in enumerate(g.roles) if r in (NodeRole.OUTPUT, NodeRole.CRITIC)]
        kinds[readout] = list(activation_set).index("identity")
    return kinds


@dataclass
class DagPlan:
    """Level schedule of a grown DAG; shared by the tape and plain-numpy forward passes."""

    n_in: int
    outputs: np.ndarray
    critic: np.ndarray
    levels: list[dict]
    position: np.ndarray

    @classmethod
    def build(cls, g: DevGraph, edge_list: list[tuple[int, int]]) -> "DagPlan":
        order = g.topological_order()
        inputs = g.nodes_with_role(NodeRole.INPUT)
        level = np.zeros(g.num_nodes, dtype=int)
        for v in order:
            if g.roles[v] is NodeRole.INPUT:
                continue
            preds = g.predecessors(v)
            level[v] = 1 + (max(level[u] for u in preds) if preds else 0)
        position = np.empty(g.num_nodes, dtype=np.int64)
        position[inputs] = np.arange(len(inputs))
        placed = len(inputs)
        levels = []
        edge_dst = np.array([d for _, d in edge_list], dtype=np.int64)
        edge_src = np.array([s for s, _ in edge_list], dtype=np.int64)
        for lv in range(1, int(level.max(initial=0)) + 1):
            nodes = np.flatnonzero(level == lv)
            position[nodes] = placed + np.arange(nodes.size)
            placed += nodes.size
            local = {int(v): i for i, v in enumerate(nodes)}
            eidx = np.flatnonzero(np.isin(edge_dst, nodes))
            levels.append({
                "nodes": nodes,
                "edges": eidx,
                "src_pos": position[edge_src[eidx]],
                "dst_local": np.array([local[int(d)] for d in edge_dst[eidx]], dtype=np.int64),
            })
        return cls(
            n_in=len(inputs),
            outputs=np.array(g.nodes_with_role(NodeRole.OUTPUT), dtype=np.int64),
            critic=np.array(g.nodes_with_role(NodeRole.CRITIC), dtype=np.int64),
            levels=levels,
            position=position,
        )


def _apply_act_tensor(pre: Tensor, kinds: np.ndarray, activation_set) -> Tensor:
    out = None
    for slot, name in enumerate(activation_set):
        mask = (kinds == slot).astype(float)[:, None]
        if not mask.any():
            continue
        if name == "tanh":
            term = ad.tanh(pre)
        elif name == "relu":
            term = ad.relu(pre)
        else:
            term = pre
        if not mask.all():
            term = term * mask
        out = term if out is None else out + term
    return out


def forward_dag(net: GrownNetwork, obs, cfg: DiffDevConfig | None = None) -> tuple[Tensor, Tensor | None]:
    """Feedforward pass in topological levels; returns ``(outputs (B, n_out), critic (B, 1) | None)``."""
    g = net.graph
    activation_set = cfg.activation_set if cfg else ACTIVATIONS
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    plan = DagPlan.build(g, net.edge_list)
    if obs.shape[1] != plan.n_in:
        raise ContractError(f"observation length {obs.shape[1]} != input count {plan.n_in}")
    tape = net.tape
    x = net.embeddings
    onehot = np.zeros((x.value.shape[1], 1))
    onehot[0, 0] = 1.0
    bias = x @ onehot
    kinds_all = node_kinds(g, x.value[:, 1], cfg)
    acts = tape.const(obs.T)
    for lv in plan.levels:
        nodes = lv["nodes"]
        pre = ad.gather_rows(bias, nodes)
        if lv["edges"].size:
            msg = ad.gather_rows(acts, lv["src_pos"]) * ad.gather_rows(net.edge_weights, lv["edges"])
            pre = pre + ad.scatter_add_rows(msg, lv["dst_local"], nodes.size)
        elif pre.value.shape[1] != obs.shape[0]:
            pre = pre + np.zeros((nodes.size, obs.shape[0]))
        acts = ad.concat([acts, _apply_act_tensor(pre, kinds_all[nodes], activation_set)], axis=0)
    outputs = ad.transpose(ad.gather_rows(acts, plan.position[plan.outputs]))
    critic = None
    if plan.critic.size:
        critic = ad.transpose(ad.gather_rows(acts, plan.position[plan.critic]))
    return outputs, critic


class FrozenPolicy:
    """Plain-numpy replica of :func:`forward_dag` for fast rollouts."""

    def __init__(self, net: GrownNetwork, cfg: DiffDevConfig | None = None):
        activation_set = cfg.activation_set if cfg else ACTIVATIONS
        self.plan = DagPlan.build(net.graph, net.edge_list)
        x = net.embeddings.value
        self.bias = x[:, 0].copy()
        kinds = node_kinds(net.graph, x[:, 1], cfg)
        self.kind_names = [activation_set[k] for k in kinds]
        self.weights = net.edge_weights.value[:, 0].copy() if net.edge_weights is not None else np.zeros(0)
        self._levels = []
        for lv in self.plan.levels:
            nodes = lv["nodes"]
            names = [self.kind_names[v] for v in nodes]
            self._levels.append((
                nodes.size, self.bias[nodes][:, None], lv["src_pos"], lv["dst_local"],
                self.weights[lv["edges"]][:, None],
                np.array([n == "tanh" for n in names]), np.array([n == "relu" for n in names]),
            ))
        self.n_in = self.plan.n_in

    def _acts(self, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.n_in:
            raise ContractError(f"observation length {obs.shape[1]} != input count {self.n_in}")
        b = obs.shape[0]
        total = self.n_in + sum(lv[0] for lv in self._levels)
        acts = np.empty((total, b))
        acts[: self.n_in] = obs.T
        start = self.n_in
        for k, bias, src_pos, dst_local, w, is_tanh, is_relu in self._levels:
            pre = np.repeat(bias, b, axis=1)
            if src_pos.size:
                np.add.at(pre, dst_local, acts[src_pos] * w)
            out = pre.copy()
            out[is_tanh] = np.tanh(pre[is_tanh])
            out[is_relu] = np.maximum(pre[is_relu], 0.0)
            acts[start:start + k] = out
            start += k
        return acts

    def __call__(self, obs) -> np.ndarray:
        acts = self._acts(obs)
        out = acts[self.plan.position[self.plan.outputs]].T
        return out[0] if np.ndim(obs) == 1 else out

    def value(self, obs) -> np.ndarray:
        acts = self._acts(obs)
        return acts[self.plan.position[self.plan.critic]].T
