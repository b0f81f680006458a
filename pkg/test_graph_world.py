import io

import networkx as nx
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from errors import MalformedMap, NodeOutOfRange
from graph_world import (UNREACHABLE, Graph, all_pairs_shortest_paths, load_map, map_digest, neighbors, read_map,
                         serialize_map, write_map)


def path_graph(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def test_path_graph_distances():
    d = all_pairs_shortest_paths(path_graph(3))
    assert d[0, 2] == 2
    assert d.diameter == 2


def test_disconnected_pair_is_unreachable():
    g = Graph.from_edges(4, [(0, 1), (2, 3)])
    d = all_pairs_shortest_paths(g)
    assert d[0, 3] == UNREACHABLE
    assert not d.reachable(0, 3)
    assert d.diameter == 1


def test_single_node_map():
    g = load_map(io.StringIO("nodes 1\n"))
    d = all_pairs_shortest_paths(g)
    assert d[0, 0] == 0
    assert d.diameter == 0
    assert_array_equal(d.normalized(), [[0.0]])


def test_distances_match_networkx_bfs():
    rng = np.random.default_rng(3)
    for trial in range(5):
        nxg = nx.gnp_random_graph(25, 0.12, seed=int(rng.integers(1000)))
        g = Graph.from_edges(25, nxg.edges())
        d = all_pairs_shortest_paths(g)
        lengths = dict(nx.all_pairs_shortest_path_length(nxg))
        for u in range(25):
            for v in range(25):
                assert d[u, v] == lengths[u].get(v, UNREACHABLE)
        assert_array_equal(d.hops, d.hops.T)


def test_triangle_inequality_on_reachable_triples():
    nxg = nx.connected_watts_strogatz_graph(30, 4, 0.3, seed=1)
    d = all_pairs_shortest_paths(Graph.from_edges(30, nxg.edges())).hops
    # d[u, v] <= d[u, w] + d[w, v] for every w
    assert np.all(d[:, :, None] <= d[:, None, :] + d.T[None, :, :])


def test_neighbors_sorted_ascending():
    g = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    assert neighbors(g, 0) == (1, 2, 3)
    assert neighbors(g, 2) == (0,)
    with pytest.raises(NodeOutOfRange):
        neighbors(g, 9)


def test_isolated_node_has_no_neighbors():
    g = Graph.from_edges(3, [(0, 1)])
    assert g.neighbors(2) == ()
    assert g.degree(2) == 0


def test_adjacency_is_symmetric_and_read_only():
    g = path_graph(4)
    adj = g.adjacency()
    assert_array_equal(adj, adj.T)
    assert adj.sum() == 2 * len(g.edges)
    with pytest.raises(ValueError):
        adj[0, 0] = True


@pytest.mark.parametrize("text", [
    "nodes 3\nedge 0 3\n",
    "nodes 3\nedge 1 1\n",
    "nodes 3\nedge 0 1\nedge 1 0\n",
    "edge 0 1\n",
    "nodes 3\nvertex 0\n",
    "nodes 3\nedge 0\n",
    "nodes x\n",
    "",
])
def test_malformed_maps(text):
    with pytest.raises(MalformedMap):
        load_map(io.StringIO(text))


def test_edge_order_does_not_change_graph():
    a = load_map(io.StringIO("nodes 4\nedge 2 1\nedge 0 1\n# comment\nedge 3 2\n"))
    b = load_map(io.StringIO("nodes 4\nedge 0 1\nedge 1 2\nedge 2 3\n"))
    assert a == b
    assert map_digest(a) == map_digest(b)


def test_serialized_map_is_canonical(tmp_path):
    g = Graph.from_edges(5, [(4, 0), (1, 0), (3, 2)])
    assert serialize_map(g) == "nodes 5\nedge 0 1\nedge 0 4\nedge 2 3\n"
    path = tmp_path / "maps" / "m.txt"
    write_map(g, path)
    assert read_map(path) == g


def test_normalized_distances():
    g = Graph.from_edges(4, [(0, 1), (1, 2)])
    norm = all_pairs_shortest_paths(g).normalized()
    assert norm[0, 2] == 1.0
    assert norm[0, 1] == 0.5
    assert norm[0, 3] == 1.0
    assert norm[3, 3] == 0.0
