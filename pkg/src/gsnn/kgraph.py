"""Knowledge graph over visual concepts.

A graph is built from relation co-occurrence counts (edges below a count
threshold are pruned) and can be fused with a taxonomy (is-a edges). Node
ids are dense and canonical: objects, then attributes, then taxonomy nodes,
each group sorted by name.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ConfigError, ParseError, VersionError

KINDS = ("object", "attribute", "taxonomy")
ATTRIBUTE_RELATION = "has-attribute"
HYPERNYM = "hypernym"
HYPONYM = "hyponym"

GRAPH_MAGIC = "GSNN-GRAPH"
GRAPH_VERSION = 1


@dataclass(frozen=True)
class ConceptNode:
    id: int
    name: str
    kind: str
    is_output_label: bool
    is_detectable: bool


@dataclass(frozen=True, order=True)
class TypedEdge:
    src: int
    dst: int
    edge_type: int


@dataclass(frozen=True)
class CooccurrenceRecord:
    concept_a: str
    relation: str
    concept_b: str
    count: int


@dataclass
class FusionReport:
    nodes_added: int = 0
    edges_added: int = 0
    edges_dropped: int = 0


class KnowledgeGraph:
    """Immutable directed graph with typed edges and per-node adjacency lists.

    ``in_edges[v]`` holds ``(u, edge_type)`` for every edge ``u -> v`` and
    ``out_edges[v]`` holds ``(u, edge_type)`` for every edge ``v -> u``.
    """

    def __init__(self, nodes: Iterable[ConceptNode], edges: Iterable[TypedEdge], edge_types: Iterable[str]):
        self.nodes = tuple(nodes)
        self.edge_types = tuple(edge_types)
        self.edges = tuple(sorted(edges))
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ConfigError(f"node ids must be contiguous from 0; got {node.id} at position {i}")
            if node.kind not in KINDS:
                raise ConfigError(f"unknown node kind {node.kind!r}")
            if node.is_detectable and not node.is_output_label:
                raise ConfigError(f"detectable node {node.name!r} must be an output label")
        if len({node.name for node in self.nodes}) != n:
            raise ConfigError("node names must be unique")
        if len(set(self.edge_types)) != len(self.edge_types):
            raise ConfigError("edge type names must be unique")
        seen = set()
        in_edges = [[] for _ in range(n)]
        out_edges = [[] for _ in range(n)]
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise ConfigError(f"edge {e} references a missing node")
            if e.src == e.dst:
                raise ConfigError(f"self-loop on node {e.src}")
            if not 0 <= e.edge_type < len(self.edge_types):
                raise ConfigError(f"edge {e} has undeclared edge type")
            if e in seen:
                raise ConfigError(f"duplicate edge {e}")
            seen.add(e)
            out_edges[e.src].append((e.dst, e.edge_type))
            in_edges[e.dst].append((e.src, e.edge_type))
        self.in_edges = tuple(tuple(x) for x in in_edges)
        self.out_edges = tuple(tuple(x) for x in out_edges)
        self._neighbors = tuple(
            frozenset(u for u, _ in in_edges[v]) | frozenset(u for u, _ in out_edges[v]) for v in range(n)
        )
        self._by_name = {node.name: node.id for node in self.nodes}
        self.label_ids = tuple(node.id for node in self.nodes if node.is_output_label)
        self.detectable_ids = tuple(node.id for node in self.nodes if node.is_detectable)

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.edges)

    def node_id(self, name):
        return self._by_name[name]

    def name(self, node_id):
        return self.nodes[node_id].name

    def __contains__(self, name):
        return name in self._by_name

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.nodes, self.edges, self.edge_types) == (other.nodes, other.edges, other.edge_types)

    def __repr__(self):
        return (f"KnowledgeGraph(nodes={self.num_nodes}, edges={self.num_edges}, "
                f"labels={len(self.label_ids)}, detectable={len(self.detectable_ids)})")

    def named_edges(self):
        for e in self.edges:
            yield self.nodes[e.src].name, self.nodes[e.dst].name, self.edge_types[e.edge_type]


def neighbors(graph: KnowledgeGraph, node: int) -> frozenset:
    """Endpoints of all edges touching ``node``, ignoring direction."""
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node id {node} out of range [0, {graph.num_nodes})")
    return graph._neighbors[node]


def _assemble(specs, named_edges, edge_types):
    """Build a graph from ``{name: (kind, is_label, is_detectable)}`` and
    ``(src_name, dst_name, type_name)`` triples, assigning canonical ids."""
    order = sorted(specs, key=lambda name: (KINDS.index(specs[name][0]), name))
    ids = {name: i for i, name in enumerate(order)}
    nodes = [ConceptNode(ids[name], name, *specs[name]) for name in order]
    type_index = {t: i for i, t in enumerate(edge_types)}
    edges = {TypedEdge(ids[a], ids[b], type_index[t]) for a, b, t in named_edges}
    return KnowledgeGraph(nodes, edges, edge_types)


def build_graph(records: Iterable[CooccurrenceRecord], prune_threshold: int = 200,
                labels: Iterable[str] | None = None, detectable: Iterable[str] = (),
                attributes: Iterable[str] = ()) -> KnowledgeGraph:
    """Build a graph keeping relations seen at least ``prune_threshold`` times.

    Counts of repeated ``(a, relation, b)`` records are summed first. Nodes are
    the endpoints of surviving edges plus every declared label; with
    ``labels=None`` every node is an output label. The target of a
    ``has-attribute`` record (and anything in ``attributes``) is an attribute
    node, everything else an object. Self-relations are ignored.
    """
    if prune_threshold < 0:
        raise ConfigError("prune_threshold must be >= 0")
    counts = defaultdict(int)
    relations = set()
    attr_names = set(attributes)
    for rec in records:
        if rec.count < 0:
            raise ConfigError(f"negative count in {rec}")
        relations.add(rec.relation)
        if rec.relation == ATTRIBUTE_RELATION:
            attr_names.add(rec.concept_b)
        if rec.concept_a != rec.concept_b:
            counts[(rec.concept_a, rec.relation, rec.concept_b)] += rec.count

    kept = [(a, b, r) for (a, r, b), c in counts.items() if c >= prune_threshold]
    names = {a for a, _, _ in kept} | {b for _, b, _ in kept}
    label_set = None if labels is None else set(labels)
    det_set = set(detectable)
    if label_set is not None:
        names |= label_set
        missing = det_set - label_set
        if missing:
            raise ConfigError(f"detectable concepts are not labels: {sorted(missing)}")
    else:
        names |= det_set
    specs = {}
    for name in names:
        kind = "attribute" if name in attr_names else "object"
        is_label = label_set is None or name in label_set
        specs[name] = (kind, is_label, name in det_set)
    return _assemble(specs, kept, tuple(sorted(relations)))


def fuse_taxonomy(base: KnowledgeGraph, taxonomy_edges: Iterable[tuple[str, str]],
                  bidirectional: bool = False) -> tuple[KnowledgeGraph, FusionReport]:
    """Merge is-a pairs ``(child, parent)`` into ``base``.

    A concept missing from ``base`` is added (as a taxonomy node) only when
    one of its taxonomy edges reaches a node already in ``base``. Every
    taxonomy edge whose endpoints are both in the resulting node set is added
    as a ``hypernym`` edge child -> parent; with ``bidirectional`` a
    ``hyponym`` edge parent -> child is added too. Other edges are dropped
    and counted in the report.
    """
    pairs = []
    seen = set()
    for child, parent in taxonomy_edges:
        if child != parent and (child, parent) not in seen:
            seen.add((child, parent))
            pairs.append((child, parent))

    existing = {node.name for node in base.nodes}
    qualifying = set()
    for child, parent in pairs:
        if child in existing and parent not in existing:
            qualifying.add(parent)
        elif parent in existing and child not in existing:
            qualifying.add(child)
    resulting = existing | qualifying

    report = FusionReport(nodes_added=len(qualifying))
    base_named = set(base.named_edges())
    new_edges = []
    for child, parent in pairs:
        if child not in resulting or parent not in resulting:
            report.edges_dropped += 1
            continue
        new_edges.append((child, parent, HYPERNYM))
        if bidirectional:
            new_edges.append((parent, child, HYPONYM))
    new_edges = [e for e in dict.fromkeys(new_edges) if e not in base_named]
    report.edges_added = len(new_edges)

    if not new_edges and not qualifying:
        return _assemble(_specs_of(base), base_named, base.edge_types), report
    edge_types = list(base.edge_types)
    for t in (HYPERNYM, HYPONYM) if bidirectional else (HYPERNYM,):
        if t not in edge_types:
            edge_types.append(t)
    specs = _specs_of(base)
    for name in qualifying:
        specs[name] = ("taxonomy", False, False)
    return _assemble(specs, base_named | set(new_edges), tuple(edge_types)), report


def _specs_of(graph):
    return {n.name: (n.kind, n.is_output_label, n.is_detectable) for n in graph.nodes}


# ---------------------------------------------------------------------------
# Text formats
# ---------------------------------------------------------------------------

def _lines(source):
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from enumerate(fh, start=1)
    else:
        yield from enumerate(source, start=1)


def read_cooccurrence(source) -> Iterator[CooccurrenceRecord]:
    """Parse ``concept_a<TAB>relation<TAB>concept_b<TAB>count`` lines.

    ``source`` is a path or an iterable of lines. Blank lines and lines
    starting with ``#`` are skipped.
    """
    path = source if isinstance(source, (str, Path)) else None
    for lineno, raw in _lines(source):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4 or not all(f.strip() for f in fields[:3]):
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", line=lineno, path=path)
        try:
            count = int(fields[3])
        except ValueError:
            raise ParseError(f"count {fields[3]!r} is not an integer", line=lineno, path=path) from None
        if count < 0:
            raise ParseError(f"negative count {count}", line=lineno, path=path)
        yield CooccurrenceRecord(fields[0], fields[1], fields[2], count)


def read_taxonomy(source) -> Iterator[tuple[str, str]]:
    """Parse ``child<TAB>parent`` or ``child<TAB>hypernym<TAB>parent`` lines."""
    path = source if isinstance(source, (str, Path)) else None
    for lineno, raw in _lines(source):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) == 2:
            yield fields[0], fields[1]
        elif len(fields) == 3 and fields[1] == HYPERNYM:
            yield fields[0], fields[2]
        elif len(fields) == 3 and fields[1] == HYPONYM:
            yield fields[2], fields[0]
        else:
            raise ParseError("expected 'child<TAB>parent' or 'a<TAB>hypernym|hyponym<TAB>b'", line=lineno, path=path)


def dumps_graph(graph: KnowledgeGraph) -> str:
    out = [f"{GRAPH_MAGIC} v{GRAPH_VERSION}"]
    for i, t in enumerate(graph.edge_types):
        out.append(f"T\t{i}\t{t}")
    for n in graph.nodes:
        out.append(f"N\t{n.id}\t{n.name}\t{n.kind}\t{int(n.is_output_label)}\t{int(n.is_detectable)}")
    rows = sorted((e.src, e.dst, graph.edge_types[e.edge_type]) for e in graph.edges)
    for src, dst, t in rows:
        out.append(f"E\t{src}\t{dst}\t{t}")
    return "\n".join(out) + "\n"


def save_graph(graph: KnowledgeGraph, path) -> None:
    Path(path).write_text(dumps_graph(graph), encoding="utf-8")


def _flag(value, lineno, path):
    if value not in ("0", "1"):
        raise ParseError(f"boolean field must be 0 or 1, got {value!r}", line=lineno, path=path)
    return value == "1"


def loads_graph(text: str, path=None) -> KnowledgeGraph:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty graph file", line=1, path=path)
    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != GRAPH_MAGIC or not header[1].startswith("v"):
        raise ParseError("missing graph header", line=1, path=path)
    if header[1] != f"v{GRAPH_VERSION}":
        raise VersionError(f"unsupported graph version {header[1]} (expected v{GRAPH_VERSION})", line=1, path=path)
    if not text.endswith("\n"):
        raise ParseError("truncated file (no trailing newline)", line=len(lines), path=path)
    types, nodes, edges = [], [], []
    type_index = {}
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split("\t")
        try:
            if f[0] == "T" and len(f) == 3:
                if int(f[1]) != len(types):
                    raise ParseError("edge types must be listed in index order", line=lineno, path=path)
                type_index[f[2]] = len(types)
                types.append(f[2])
            elif f[0] == "N" and len(f) == 6:
                if f[3] not in KINDS:
                    raise ParseError(f"unknown node kind {f[3]!r}", line=lineno, path=path)
                nodes.append(ConceptNode(int(f[1]), f[2], f[3], _flag(f[4], lineno, path), _flag(f[5], lineno, path)))
            elif f[0] == "E" and len(f) == 4:
                if f[3] not in type_index:
                    raise ParseError(f"unknown edge type {f[3]!r}", line=lineno, path=path)
                edges.append(TypedEdge(int(f[1]), int(f[2]), type_index[f[3]]))
            else:
                raise ParseError(f"malformed record {line[:40]!r}", line=lineno, path=path)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line=lineno, path=path) from exc
    try:
        return KnowledgeGraph(nodes, edges, types)
    except ConfigError as exc:
        raise ParseError(f"inconsistent graph: {exc}", path=path) from exc


def load_graph(path) -> KnowledgeGraph:
    return loads_graph(Path(path).read_text(encoding="utf-8"), path=path)
