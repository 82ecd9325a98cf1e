import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndp.graph import (
    DevGraph, GraphMode, MetricError, ModeError, NodeRole, StructureError, average_clustering,
    average_shortest_path, diameter, export_dot, lattice_degree, ring_lattice, small_world_metrics,
)


def undirected(n, edges):
    g = DevGraph(GraphMode.UNDIRECTED, 2)
    for _ in range(n):
        g.add_node(NodeRole.HIDDEN, [0.0, 0.0])
    for s, d in edges:
        g.add_edge(s, d)
    return g


def complete(n):
    return undirected(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def to_nx(g):
    h = nx.Graph()
    h.add_nodes_from(range(g.num_nodes))
    h.add_edges_from(g.edges)
    return h


@st.composite
def random_graphs(draw, max_nodes=20):
    n = draw(st.integers(2, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return undirected(n, [p for p, m in zip(pairs, mask) if m])


def test_undirected_edges_are_canonical():
    g = undirected(3, [(2, 0)])
    assert (0, 2) in g.edges
    assert g.has_edge(0, 2) and g.has_edge(2, 0)
    assert g.neighbors(0) == [2] and g.neighbors(2) == [0]


def test_self_loop_and_missing_node_rejected():
    g = undirected(2, [])
    with pytest.raises(StructureError):
        g.add_edge(1, 1)
    with pytest.raises(StructureError):
        g.add_edge(0, 5)


def test_embedding_dimension_enforced():
    g = undirected(1, [])
    with pytest.raises(StructureError):
        g.add_node(NodeRole.HIDDEN, [1.0, 2.0, 3.0])


def test_dag_rejects_cycles_and_orders_topologically():
    g = DevGraph(GraphMode.DAG, 1)
    for _ in range(4):
        g.add_node(NodeRole.HIDDEN, [0.0])
    g.add_edge(0, 1)
    g.add_edge(1, 2)
    g.add_edge(0, 3)
    with pytest.raises(StructureError):
        g.add_edge(2, 0)
    order = g.topological_order()
    pos = {v: i for i, v in enumerate(order)}
    assert all(pos[s] < pos[d] for s, d in g.edges)


def test_topological_order_needs_dag():
    with pytest.raises(ModeError):
        undirected(2, [(0, 1)]).topological_order()


def test_single_node_diameter_is_zero():
    assert diameter(undirected(1, [])) == 0


def test_path_and_complete_diameters():
    assert diameter(undirected(5, [(i, i + 1) for i in range(4)])) == 4
    assert diameter(complete(6)) == 1


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_diameter_matches_networkx_on_largest_component(g):
    h = to_nx(g)
    comps = sorted(nx.connected_components(h), key=len, reverse=True)
    size = len(comps[0])
    expected = max((nx.diameter(h.subgraph(c)) for c in comps if len(c) == size), default=0) if size > 1 else 0
    assert diameter(g) == expected


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_components_match_networkx(g):
    ours = sorted(tuple(c) for c in g.components())
    theirs = sorted(tuple(sorted(c)) for c in nx.connected_components(to_nx(g)))
    assert ours == theirs


def test_json_round_trip_preserves_everything():
    g = DevGraph(GraphMode.DAG, 2)
    g.add_node(NodeRole.INPUT, [0.1, 0.2])
    g.add_node(NodeRole.HIDDEN, [0.3, -0.4])
    g.add_node(NodeRole.OUTPUT, [1.0, 2.0])
    g.add_edge(0, 1, 0.5)
    g.add_edge(1, 2, -0.25)
    h = DevGraph.from_json(g.to_json())
    assert h.mode is GraphMode.DAG
    assert h.roles == g.roles
    assert h.edges == g.edges
    assert np.array_equal(h.embeddings, g.embeddings)


def test_export_dot_for_k4():
    g = complete(4)
    g.roles[0] = NodeRole.INPUT
    g.roles[3] = NodeRole.OUTPUT
    dot = export_dot(g)
    assert dot.startswith("graph G {")
    assert dot.count(" -- ") == 6
    assert "fillcolor=red" in dot and "fillcolor=blue" in dot


def test_average_clustering_matches_networkx():
    h = nx.connected_watts_strogatz_graph(30, 4, 0.2, seed=3)
    a = nx.to_numpy_array(h)
    assert average_clustering(a) == pytest.approx(nx.average_clustering(h), abs=1e-12)
    assert average_shortest_path(a) == pytest.approx(nx.average_shortest_path_length(h), abs=1e-12)


@pytest.mark.parametrize("n,k", [(10, 2), (20, 4), (30, 6), (50, 8)])
def test_ring_lattice_clustering_closed_form(n, k):
    assert average_clustering(ring_lattice(n, k)) == pytest.approx(3 * (k - 2) / (4 * (k - 1)), abs=1e-12)


def test_lattice_degree_rounds_half_up():
    assert lattice_degree(10, 15) == 4  # 2m/n = 3 rounds up to 4
    assert lattice_degree(10, 14) == 2
    assert lattice_degree(5, 10) == 4  # capped below n


def test_small_world_metrics_reject_small_and_disconnected():
    with pytest.raises(MetricError):
        small_world_metrics(complete(3))
    with pytest.raises(MetricError):
        small_world_metrics(undirected(6, [(0, 1), (1, 2), (3, 4), (4, 5)]))


def test_small_world_metrics_of_watts_strogatz():
    h = nx.connected_watts_strogatz_graph(40, 6, 0.1, seed=1)
    g = undirected(40, list(h.edges))
    r = small_world_metrics(g, n_random_refs=10, rng_seed=0)
    assert r.c == pytest.approx(nx.average_clustering(h))
    assert r.l == pytest.approx(nx.average_shortest_path_length(h))
    assert r.sigma == pytest.approx((r.c / r.c_r) / (r.l / r.l_r))
    assert r.omega == pytest.approx(r.l_r / r.l - r.c / r.c_l)
    assert r.sigma > 1.5
