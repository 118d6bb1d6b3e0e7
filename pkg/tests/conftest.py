import numpy as np
import pytest

from gsnn.kgraph import ConceptNode, KnowledgeGraph, TypedEdge
from gsnn.numeric import ParameterSet
from gsnn.propagation import ModelDims, init_propagation_params

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_grad(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def random_graph(rng, n, n_edges, n_types=2, n_detectable=3, labels=True):
    nodes = [ConceptNode(i, f"c{i:02d}", "object", labels, labels and i < n_detectable) for i in range(n)]
    edges = set()
    max_edges = n * (n - 1) * n_types
    target = min(n_edges, max_edges)
    while len(edges) < target:
        s, d = rng.integers(n, size=2)
        if s != d:
            edges.add(TypedEdge(int(s), int(d), int(rng.integers(n_types))))
    return KnowledgeGraph(nodes, edges, [f"rel{t}" for t in range(n_types)])


def random_params(rng, graph, hidden=4, out=3, scale=1.0):
    p = ParameterSet()
    init_propagation_params(p, ModelDims(hidden, 1, out, len(graph.edge_types), graph.num_nodes), rng)
    for n in p:
        p.values[n][:] = rng.normal(scale=scale, size=p.values[n].shape)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def covering_graph(rng, n):
    """Random graph in which node 0 (detectable) neighbours every other node,
    so the initial active set of a search from node 0 is the whole graph."""
    base = random_graph(rng, n, int(rng.integers(n, 3 * n)), n_types=int(rng.integers(1, 4)), n_detectable=2)
    edges = set(base.edges)
    touched = {e.dst for e in edges if e.src == 0} | {e.src for e in edges if e.dst == 0}
    for v in range(1, n):
        if v not in touched:
            e = int(rng.integers(len(base.edge_types)))
            edges.add(TypedEdge(0, v, e) if rng.random() < 0.5 else TypedEdge(v, 0, e))
    return KnowledgeGraph(base.nodes, edges, base.edge_types)


def bfs_hops(graph, labels):
    """Undirected hop distance from every node to the nearest label, by one
    breadth-first search per node (None when unreachable)."""
    from collections import deque
    adj = {v: set() for v in range(graph.num_nodes)}
    for e in graph.edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    out = []
    for start in range(graph.num_nodes):
        seen = {start: 0}
        queue = deque([start])
        found = None
        while queue:
            v = queue.popleft()
            if v in labels:
                found = seen[v]
                break
            for u in sorted(adj[v]):
                if u not in seen:
                    seen[u] = seen[v] + 1
                    queue.append(u)
        out.append(found)
    return out


def bfs_targets(graph, labels, gamma, max_hops):
    return np.array([0.0 if d is None or d > max_hops else gamma ** d for d in bfs_hops(graph, labels)])
