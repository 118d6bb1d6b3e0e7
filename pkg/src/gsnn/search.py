"""Budgeted graph search: propagate over a growing active subgraph.

Starting from detected concepts and their neighbours, each round propagates
hidden states over the active nodes, scores them with the importance net and
expands the best ``P`` never-expanded nodes, activating their neighbours.
Only active nodes hold state, so cost depends on the expansion budget rather
than on the size of the graph.

:func:`run_dense_ggnn` runs the same recurrence over every node with dense
adjacency matrices. It is the reference the sparse path is checked against
and the quadratic baseline in the scaling benchmark.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, DimensionError
from .kgraph import KnowledgeGraph, neighbors
from .numeric import gru_gate_backward, gru_gate_step
from .propagation import (
    GATE_PARAMS,
    EdgeRouting,
    _message_stack,
    init_hidden,
    node_importance,
    node_importance_backward,
    node_output,
    node_output_backward,
    propagate_backward,
    propagate_step,
)

INACTIVE, ACTIVE, EXPANDED = "inactive", "active", "expanded"


@dataclass
class GsnnConfig:
    detection_threshold: float = 0.5
    expand_per_step: int = 5
    steps: int = 3
    hidden_dim: int = 10
    out_dim: int = 5
    importance_discount: float = 0.3
    importance_weight: float = 1.0
    importance_max_hops: int = 3
    # Rounds run after propagation steps 1..expansion_rounds; None means steps - 1.
    expansion_rounds: int | None = None
    binary_annotation: bool = False
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.importance_discount < 1.0:
            raise ConfigError("importance_discount must be in (0, 1)")
        if self.expand_per_step < 1:
            raise ConfigError("expand_per_step must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ConfigError("hidden_dim and out_dim must be >= 1")
        if self.expansion_rounds is not None and not 0 <= self.expansion_rounds <= self.steps - 1:
            raise ConfigError("expansion_rounds must be in [0, steps - 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.importance_max_hops < 0:
            raise ConfigError("importance_max_hops must be >= 0")

    @property
    def rounds(self):
        return self.steps - 1 if self.expansion_rounds is None else self.expansion_rounds

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class RoundLog:
    """Importance scores of the first ``num_scored`` active rows in one round."""

    num_scored: int
    scores: np.ndarray
    inputs: np.ndarray
    chosen: tuple


@dataclass(frozen=True)
class ExpansionTrace:
    """The discrete choices of a forward pass, for exact replay."""

    initial: tuple
    rounds: tuple


class ActiveSubgraph:
    """Per-example search state.

    ``nodes[i]`` is the global id of local row ``i``; rows are appended in
    activation order and never removed. ``hidden`` and ``annotations`` are
    row-aligned with ``nodes``. Edges between active nodes are kept as local
    index lists that only grow.
    """

    def __init__(self, graph: KnowledgeGraph, hidden_dim: int, annotation_dim: int = 1):
        self.graph = graph
        self.nodes: list[int] = []
        self.local: dict[int, int] = {}
        self.expanded: set[int] = set()
        self.detected: tuple = ()
        self.hidden = np.zeros((0, hidden_dim))
        self.annotations = np.zeros((0, annotation_dim))
        self.src: list[int] = []
        self.dst: list[int] = []
        self.etype: list[int] = []
        self.importance_log: list[RoundLog] = []

    @property
    def active(self):
        return set(self.local)

    @property
    def num_active(self):
        return len(self.nodes)

    def status(self, node):
        if node in self.expanded:
            return EXPANDED
        return ACTIVE if node in self.local else INACTIVE

    def activate(self, ids, annotations=None):
        """Append inactive ``ids`` (in the given order) with zero hidden state."""
        new = [v for v in ids if v not in self.local]
        if not new:
            return []
        start = len(self.nodes)
        for i, v in enumerate(new):
            self.local[v] = start + i
            self.nodes.append(v)
        X = np.zeros((len(new), self.annotations.shape[1]))
        if annotations is not None:
            X[:] = np.reshape(annotations, X.shape)
        self.annotations = np.concatenate([self.annotations, X])
        self.hidden = np.concatenate([self.hidden, init_hidden(X, self.hidden.shape[1])])
        new_set = set(new)
        g = self.graph
        for v in new:
            lv = self.local[v]
            for u, e in g.out_edges[v]:
                lu = self.local.get(u)
                if lu is not None:
                    self.src.append(lv)
                    self.dst.append(lu)
                    self.etype.append(e)
            for u, e in g.in_edges[v]:
                lu = self.local.get(u)
                if lu is not None and u not in new_set:
                    self.src.append(lu)
                    self.dst.append(lv)
                    self.etype.append(e)
        return new

    def expand(self, ids):
        """Mark ``ids`` expanded and activate all their neighbours."""
        for v in ids:
            self.expanded.add(v)
        frontier = sorted({u for v in ids for u in neighbors(self.graph, v)} - self.local.keys())
        self.activate(frontier)

    def routing(self):
        return EdgeRouting.from_edges(self.src, self.dst, self.etype, len(self.graph.edge_types))

    def trace(self):
        return ExpansionTrace(self.detected, tuple(r.chosen for r in self.importance_log))

    def expanded_edges(self):
        """Named edges with both endpoints active and at least one expanded."""
        out = []
        for s, d, e in zip(self.src, self.dst, self.etype):
            u, v = self.nodes[s], self.nodes[d]
            if u in self.expanded or v in self.expanded:
                out.append((self.graph.name(u), self.graph.edge_types[e], self.graph.name(v)))
        return out


def detected_nodes(graph, detections, config):
    """Detectable node ids scoring at or above the threshold.

    If none qualifies, the single best detection (lowest id on ties) is used.
    """
    detections = np.asarray(detections, dtype=np.float64)
    if detections.shape != (len(graph.detectable_ids),):
        raise DimensionError(f"expected {len(graph.detectable_ids)} detection scores, got shape {detections.shape}")
    if detections.size == 0:
        return [], np.zeros(0)
    idx = np.flatnonzero(detections >= config.detection_threshold)
    if idx.size == 0:
        idx = np.array([int(np.argmax(detections))])
    ids = [graph.detectable_ids[i] for i in idx]
    return ids, detections[idx]


def initialize_subgraph(graph, detections, config, trace=None):
    """Detected nodes become active and expanded with their score as
    annotation; their neighbours become active with zero state."""
    sub = ActiveSubgraph(graph, config.hidden_dim)
    if trace is not None:
        det_pos = {v: i for i, v in enumerate(graph.detectable_ids)}
        ids = list(trace.initial)
        scores = np.asarray(detections, dtype=np.float64)[[det_pos[v] for v in ids]]
    else:
        ids, scores = detected_nodes(graph, detections, config)
    ann = np.ones_like(scores) if config.binary_annotation else scores
    sub.detected = tuple(ids)
    sub.activate(ids, ann[:, None])
    sub.expand(ids)
    return sub


def select_top(candidates, scores, count):
    """Top ``count`` candidates by score; lower node id wins ties."""
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return [candidates[i] for i in order[:count]]


def expansion_round(sub, params, config, forced=None):
    """Score every active node, expand the best ``P`` never-expanded ones."""
    n = sub.num_active
    scores, inputs = node_importance(sub.hidden, sub.annotations, params)
    if forced is not None:
        chosen = list(forced)
    else:
        cands = [v for v in sub.nodes if v not in sub.expanded]
        cand_scores = [scores[sub.local[v]] for v in cands]
        chosen = select_top(cands, cand_scores, config.expand_per_step)
    sub.importance_log.append(RoundLog(n, scores, inputs, tuple(chosen)))
    sub.expand(chosen)
    return sub


@dataclass
class GsnnResult:
    subgraph: ActiveSubgraph
    outputs: np.ndarray
    output_inputs: np.ndarray
    steps: list = field(default_factory=list)
    # Hidden-state row count entering each propagation step.
    rows: list = field(default_factory=list)

    @property
    def nodes(self):
        return self.subgraph.nodes

    def outputs_by_node(self):
        return {v: self.outputs[i] for i, v in enumerate(self.subgraph.nodes)}


def run_gsnn(graph, detections, params, config, trace=None, state_hook=None):
    """Forward pass: initialise, then ``steps`` propagation steps with an
    expansion round after each of the first ``config.rounds`` steps, then
    per-node outputs for every active node.

    With ``trace`` the initial set and expansion choices are replayed
    instead of recomputed. ``state_hook(t, subgraph)`` may modify
    ``subgraph.hidden`` in place before step ``t`` (and with
    ``t == steps`` before the output net).
    """
    sub = initialize_subgraph(graph, detections, config, trace)
    result = GsnnResult(sub, None, None)
    for t in range(config.steps):
        result.rows.append(sub.num_active)
        if state_hook is not None:
            state_hook(t, sub)
        sub.hidden, cache = propagate_step(sub.hidden, sub.routing(), params)
        result.steps.append(cache)
        if t < config.rounds:
            forced = trace.rounds[t] if trace is not None else None
            expansion_round(sub, params, config, forced)
    if state_hook is not None:
        state_hook(config.steps, sub)
    nb = params["node_bias"][0, sub.nodes] if sub.nodes else np.zeros(0)
    result.outputs, result.output_inputs = node_output(sub.hidden, sub.annotations, nb, params)
    return result


def gsnn_backward(result, params, d_outputs, d_scores=None):
    """Backpropagate through a :func:`run_gsnn` forward.

    ``d_outputs`` is row-aligned with ``result.outputs``; ``d_scores[r]`` (if
    given) is the gradient w.r.t. round ``r``'s logged importance scores.
    Parameter gradients are accumulated into ``params``. Returns
    ``(dstates, dannotations)`` where ``dstates[t]`` is the gradient w.r.t.
    the hidden state entering step ``t`` (the last entry is the final state)
    and ``dannotations`` is row-aligned with the final active set.
    """
    sub = result.subgraph
    dH, dX, dnb = node_output_backward(d_outputs, result.outputs, result.output_inputs, params)
    if sub.nodes:
        if params.grads["node_bias"] is None:
            params.zero_grad(["node_bias"])
        params.grads["node_bias"][0, sub.nodes] += dnb
    dX = dX.copy()
    dstates = [None] * (len(result.steps) + 1)
    dstates[-1] = dH
    log = sub.importance_log
    for t in range(len(result.steps) - 1, -1, -1):
        n = result.rows[t]
        if t < len(log):
            # State after step t fed round t; rows added by the round are constants.
            dH = dH[: log[t].num_scored].copy()
            if d_scores is not None and d_scores[t] is not None:
                dHi, dXi = node_importance_backward(d_scores[t], log[t].scores, log[t].inputs, params)
                dH += dHi
                dX[: log[t].num_scored] += dXi
        dH = propagate_backward(dH[:n], result.steps[t], params)
        dstates[t] = dH
    n0 = result.rows[0] if result.rows else sub.num_active
    dX[:n0] += dstates[0][:, : dX.shape[1]] if dstates[0] is not None else 0.0
    return dstates, dX


def importance_targets(graph, label_nodes, gamma, max_hops):
    """``gamma ** d`` where ``d`` is the undirected hop distance to the
    nearest label node; 0 beyond ``max_hops`` or when unreachable."""
    targets = np.zeros(graph.num_nodes)
    dist = {}
    queue = deque()
    for v in label_nodes:
        if v not in dist:
            dist[v] = 0
            queue.append(v)
    while queue:
        v = queue.popleft()
        if dist[v] >= max_hops:
            continue
        for u in graph._neighbors[v]:
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    for v, d in dist.items():
        targets[v] = gamma ** d
    return targets


# ---------------------------------------------------------------------------
# Dense reference
# ---------------------------------------------------------------------------

def dense_adjacency(graph):
    """``M[e, v, u] = 1`` for every edge ``u -> v`` of type ``e``."""
    n = graph.num_nodes
    M = np.zeros((len(graph.edge_types), n, n))
    for e in graph.edges:
        M[e.edge_type, e.dst, e.src] = 1.0
    return M


def dense_annotations(graph, detections, config):
    ids, scores = detected_nodes(graph, detections, config)
    X = np.zeros((graph.num_nodes, 1))
    X[ids, 0] = 1.0 if config.binary_annotation else scores
    return X


class DenseGGNN:
    """Full-graph recurrence with dense adjacency: every node is active
    from the first step, so one step costs O(N^2 H)."""

    def __init__(self, graph, params, config):
        self.graph = graph
        self.params = params
        self.config = config
        self.M = dense_adjacency(graph)

    def forward(self, detections):
        p = self.params
        X = dense_annotations(self.graph, detections, self.config)
        H = np.zeros((self.graph.num_nodes, p["prop.Wz"].shape[0]))
        H[:, : X.shape[1]] = X
        Wm = _message_stack(p)
        E = self.M.shape[0]
        gates = [p[n] for n in GATE_PARAMS]
        self._tape = []
        for _ in range(self.config.steps):
            agg_in = np.stack([self.M[e] @ H for e in range(E)])
            agg_out = np.stack([self.M[e].T @ H for e in range(E)])
            a = p["prop.msg_bias"] + np.einsum("enh,ekh->nk", agg_in, Wm[:E]) + np.einsum("enh,ekh->nk", agg_out, Wm[E:])
            H_next, cache = gru_gate_step(H, a, *gates)
            self._tape.append((agg_in, agg_out, cache))
            H = H_next
        out, inp = node_output(H, X, p["node_bias"][0], p)
        self._out = (out, inp)
        return out

    def backward(self, d_outputs):
        p = self.params
        out, inp = self._out
        dH, _, dnb = node_output_backward(d_outputs, out, inp, p)
        p.accumulate("node_bias", dnb[None, :])
        Wm = _message_stack(p)
        E = self.M.shape[0]
        Hd = Wm.shape[1]
        gates = [p[n] for n in GATE_PARAMS]
        for agg_in, agg_out, cache in reversed(self._tape):
            dH_prev, da, grads = gru_gate_backward(dH, cache, *gates)
            for name, g in grads.items():
                p.accumulate("prop." + name, g)
            p.accumulate("prop.msg_bias", da.sum(axis=0))
            p.accumulate("prop.msg_in", np.einsum("nk,enh->ekh", da, agg_in).reshape(-1, Hd))
            p.accumulate("prop.msg_out", np.einsum("nk,enh->ekh", da, agg_out).reshape(-1, Hd))
            d_in = da @ Wm[:E]  # (E, N, H)
            d_out = da @ Wm[E:]
            for e in range(E):
                dH_prev += self.M[e].T @ d_in[e] + self.M[e] @ d_out[e]
            dH = dH_prev
        return dH


def run_dense_ggnn(graph, detections, params, config):
    """Per-node outputs (N x out_dim) with every node active from step 1."""
    return DenseGGNN(graph, params, config).forward(detections)
