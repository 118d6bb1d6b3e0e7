"""Build a small knowledge graph from relation counts, prune it, and fuse an
is-a taxonomy on top."""

from gsnn.kgraph import CooccurrenceRecord, build_graph, dumps_graph, fuse_taxonomy, neighbors

records = [
    CooccurrenceRecord("dog", "near", "grass", 900),
    CooccurrenceRecord("dog", "on", "sofa", 240),
    CooccurrenceRecord("cat", "on", "sofa", 610),
    CooccurrenceRecord("cat", "near", "mouse", 45),   # too rare, pruned
    CooccurrenceRecord("grass", "has-attribute", "green", 1200),
]

# Relations seen fewer than 200 times are dropped before any node is created.
graph = build_graph(records, prune_threshold=200, detectable=["cat", "dog"])
print(dumps_graph(graph))

sofa = graph.node_id("sofa")
print("neighbours of sofa:", sorted(graph.name(v) for v in neighbors(graph, sofa)))

# "animal" joins because it touches two existing concepts; "vehicle" does not.
fused, fusion = fuse_taxonomy(graph, [("dog", "animal"), ("cat", "animal"), ("car", "vehicle")])
print(fusion)
print("kinds:", {n.name: n.kind for n in fused.nodes})
