"""
Graph representation, map I/O and all-pairs shortest paths.

Map text format (UTF-8, line oriented):

    # comments start with '#'
    nodes <n>
    edge <u> <v>
    ...

Writers emit edges with u < v, sorted lexicographically. The reader accepts
either endpoint order and canonicalizes, so edge order never affects a Graph.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, TextIO, Tuple, Union

import numpy as np

from errors import MalformedMap, NodeOutOfRange

logger = logging.getLogger(__name__)

# Hop-count sentinel for disconnected pairs. Never a large finite number.
UNREACHABLE = -1

Edge = Tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Static undirected graph with node ids 0..node_count-1."""
    node_count: int
    edges: Tuple[Edge, ...]
    _neighbors: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise MalformedMap(f"node count must be positive, got {self.node_count}")
        canonical = set()
        for u, v in self.edges:
            if u == v:
                raise MalformedMap(f"self-loop edge on node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise MalformedMap(f"edge ({u}, {v}) has an endpoint outside 0..{self.node_count - 1}")
            key = (min(u, v), max(u, v))
            if key in canonical:
                raise MalformedMap(f"duplicate edge {key}")
            canonical.add(key)
        ordered = tuple(sorted(canonical))
        object.__setattr__(self, "edges", ordered)

        adjacent = [[] for _ in range(self.node_count)]
        for u, v in ordered:
            adjacent[u].append(v)
            adjacent[v].append(u)
        object.__setattr__(self, "_neighbors", tuple(tuple(sorted(a)) for a in adjacent))

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[Edge]) -> "Graph":
        return cls(node_count=node_count, edges=tuple((int(u), int(v)) for u, v in edges))

    def neighbors(self, v: int) -> Tuple[int, ...]:
        if not 0 <= v < self.node_count:
            raise NodeOutOfRange(f"node {v} not in 0..{self.node_count - 1}")
        return self._neighbors[v]

    def degree(self, v: int) -> int:
        return len(self.neighbors(v))

    @cached_property
    def _adjacency(self) -> np.ndarray:
        adj = np.zeros((self.node_count, self.node_count), dtype=bool)
        for u, v in self.edges:
            adj[u, v] = adj[v, u] = True
        adj.flags.writeable = False
        return adj

    def adjacency(self) -> np.ndarray:
        """Read-only n×n boolean adjacency matrix."""
        return self._adjacency


@dataclass(frozen=True)
class DistanceMatrix:
    """All-pairs hop counts; UNREACHABLE marks disconnected pairs."""
    hops: np.ndarray
    diameter: int

    @property
    def node_count(self) -> int:
        return self.hops.shape[0]

    def __getitem__(self, index):
        return self.hops[index]

    def reachable(self, u: int, v: int) -> bool:
        return self.hops[u, v] != UNREACHABLE

    def normalized(self) -> np.ndarray:
        """Distances divided by the diameter, UNREACHABLE mapped to 1.0."""
        out = np.ones(self.hops.shape, dtype=np.float64)
        finite = self.hops != UNREACHABLE
        if self.diameter > 0:
            out[finite] = self.hops[finite] / self.diameter
        else:
            out[finite] = 0.0
        return out


def neighbors(g: Graph, v: int) -> Tuple[int, ...]:
    """Adjacent node ids in ascending order."""
    return g.neighbors(v)


def all_pairs_shortest_paths(g: Graph) -> DistanceMatrix:
    """Floyd–Warshall over unit edge weights."""
    n = g.node_count
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    dist[g.adjacency()] = 1.0
    for k in range(n):
        dist = np.minimum(dist, dist[:, k, None] + dist[None, k, :])

    finite = np.isfinite(dist)
    hops = np.full((n, n), UNREACHABLE, dtype=np.int64)
    hops[finite] = dist[finite].astype(np.int64)
    hops.flags.writeable = False
    diameter = int(hops[finite].max()) if finite.any() else 0
    return DistanceMatrix(hops=hops, diameter=diameter)


def load_map(source: TextIO) -> Graph:
    """Parse the map text format into a validated Graph."""
    node_count = None
    edges = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        keyword = tokens[0]
        try:
            if keyword == "nodes":
                if node_count is not None:
                    raise MalformedMap(f"line {lineno}: repeated 'nodes' declaration")
                if edges:
                    raise MalformedMap(f"line {lineno}: 'nodes' must precede all edges")
                if len(tokens) != 2:
                    raise MalformedMap(f"line {lineno}: expected 'nodes <n>'")
                node_count = int(tokens[1])
            elif keyword == "edge":
                if node_count is None:
                    raise MalformedMap(f"line {lineno}: edge before 'nodes' declaration")
                if len(tokens) != 3:
                    raise MalformedMap(f"line {lineno}: expected 'edge <u> <v>'")
                edges.append((int(tokens[1]), int(tokens[2])))
            else:
                raise MalformedMap(f"line {lineno}: unknown token '{keyword}'")
        except ValueError as e:
            raise MalformedMap(f"line {lineno}: {e}") from e

    if node_count is None:
        raise MalformedMap("missing 'nodes <n>' declaration")
    graph = Graph.from_edges(node_count, edges)
    logger.debug(f"Loaded map with {graph.node_count} nodes and {len(graph.edges)} edges")
    return graph


def serialize_map(g: Graph) -> str:
    lines = [f"nodes {g.node_count}"]
    lines.extend(f"edge {u} {v}" for u, v in g.edges)
    return "\n".join(lines) + "\n"


def read_map(path: Union[str, Path]) -> Graph:
    logger.info(f"Reading map from {path}")
    with open(path, "r", encoding="utf-8") as f:
        return load_map(f)


def write_map(g: Graph, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_map(g))
    logger.info(f"Wrote map with {g.node_count} nodes to {path}")


def map_digest(g: Graph) -> str:
    return hashlib.sha256(serialize_map(g).encode("utf-8")).hexdigest()
