import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsnn.errors import ConfigError, ParseError, VersionError
from gsnn.kgraph import (
    ConceptNode,
    CooccurrenceRecord,
    KnowledgeGraph,
    TypedEdge,
    build_graph,
    dumps_graph,
    fuse_taxonomy,
    load_graph,
    loads_graph,
    neighbors,
    read_cooccurrence,
    read_taxonomy,
    save_graph,
)

R = CooccurrenceRecord


@pytest.fixture
def three_nodes():
    # a -> b (on), b -> a (near), b -> c (on)
    nodes = [ConceptNode(0, "a", "object", True, True), ConceptNode(1, "b", "object", True, False),
             ConceptNode(2, "c", "attribute", True, False)]
    return KnowledgeGraph(nodes, [TypedEdge(0, 1, 1), TypedEdge(1, 0, 0), TypedEdge(1, 2, 1)], ["near", "on"])


class TestBuild:
    def test_common_relation_kept(self):
        g = build_graph([R("grass", "has-attribute", "green", 450)], 200)
        assert list(g.named_edges()) == [("grass", "green", "has-attribute")]
        assert g.nodes[g.node_id("green")].kind == "attribute"

    def test_rare_relation_pruned(self):
        g = build_graph([R("person", "rides", "zebra", 3)], 200, labels=["person"])
        assert g.num_edges == 0
        assert [n.name for n in g.nodes] == ["person"]

    def test_empty_stream_keeps_labels(self):
        g = build_graph([], 200, labels=["dog", "cat"], detectable=["dog"])
        assert [n.name for n in g.nodes] == ["cat", "dog"]
        assert g.num_edges == 0
        assert g.detectable_ids == (1,)

    def test_duplicates_are_summed(self):
        recs = [R("person", "wears", "shirt", 120), R("person", "wears", "shirt", 100)]
        assert build_graph(recs, 200).num_edges == 1
        assert build_graph(recs[:1], 200).num_edges == 0

    def test_canonical_order(self):
        recs = [R("zebra", "near", "apple", 300), R("apple", "has-attribute", "red", 300),
                R("apple", "has-attribute", "big", 300)]
        g = build_graph(recs, 200)
        assert [n.name for n in g.nodes] == ["apple", "zebra", "big", "red"]
        assert g.edge_types == ("has-attribute", "near")

    def test_detectable_must_be_label(self):
        with pytest.raises(ConfigError):
            build_graph([], 200, labels=["a"], detectable=["b"])

    def test_deterministic(self):
        recs = [R("b", "on", "a", 300), R("c", "near", "b", 250), R("a", "has-attribute", "x", 999)]
        assert dumps_graph(build_graph(recs, 200)) == dumps_graph(build_graph(list(reversed(recs)), 200))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from(["on", "near"]),
                              st.sampled_from("abcdef"), st.integers(0, 500)), max_size=30),
           st.integers(0, 500), st.integers(0, 500))
    def test_pruning_monotone(self, rows, t1, t2):
        t1, t2 = sorted((t1, t2))
        recs = [R(*r) for r in rows]
        low = set(build_graph(recs, t1).named_edges())
        high = set(build_graph(recs, t2).named_edges())
        assert high <= low


class TestFusion:
    def test_dog_is_an_animal(self):
        base = build_graph([R("dog", "near", "grass", 300)], 200)
        fused, report = fuse_taxonomy(base, [("dog", "animal")])
        assert "animal" in fused
        assert fused.nodes[fused.node_id("animal")].kind == "taxonomy"
        assert ("dog", "animal", "hypernym") in set(fused.named_edges())
        assert report.nodes_added == 1 and report.edges_added == 1

    def test_disconnected_edge_dropped(self):
        base = build_graph([R("dog", "near", "grass", 300)], 200)
        fused, report = fuse_taxonomy(base, [("oak", "tree")])
        assert report.edges_dropped == 1
        assert fused == base

    def test_identity_fusion(self, three_nodes):
        fused, report = fuse_taxonomy(three_nodes, [])
        assert fused == three_nodes
        assert report.edges_added == 0

    def test_edges_among_new_nodes(self):
        base = build_graph([R("dog", "near", "cat", 300)], 200)
        fused, report = fuse_taxonomy(base, [("dog", "canine"), ("cat", "feline"), ("canine", "feline"),
                                             ("canine", "carnivore")])
        names = set(fused.named_edges())
        assert ("canine", "feline", "hypernym") in names
        assert "carnivore" not in fused  # two hops from the base graph
        assert report.edges_dropped == 1

    def test_bidirectional(self):
        base = build_graph([R("dog", "near", "cat", 300)], 200)
        fused, _ = fuse_taxonomy(base, [("dog", "animal")], bidirectional=True)
        names = set(fused.named_edges())
        assert {("dog", "animal", "hypernym"), ("animal", "dog", "hyponym")} <= names

    def test_conservative_and_label_order_unchanged(self):
        recs = [R("dog", "near", "cat", 300), R("cat", "has-attribute", "black", 300)]
        base = build_graph(recs, 200, labels=["cat", "dog", "black", "zzz"])
        fused, _ = fuse_taxonomy(base, [("dog", "animal"), ("cat", "animal"), ("zzz", "aaa")])
        assert {n.name for n in base.nodes} <= {n.name for n in fused.nodes}
        assert set(base.named_edges()) <= set(fused.named_edges())
        assert [fused.name(v) for v in fused.label_ids] == [base.name(v) for v in base.label_ids]


class TestNeighbors:
    def test_star(self):
        nodes = [ConceptNode(i, f"n{i}", "object", True, False) for i in range(5)]
        g = KnowledgeGraph(nodes, [TypedEdge(0, i, 0) for i in range(1, 5)], ["r"])
        assert neighbors(g, 0) == {1, 2, 3, 4}
        assert neighbors(g, 3) == {0}

    def test_isolated(self):
        g = build_graph([], 0, labels=["x"])
        assert neighbors(g, 0) == set()

    def test_in_and_out_to_same_peer(self, three_nodes):
        assert neighbors(three_nodes, 0) == {1}
        assert neighbors(three_nodes, 1) == {0, 2}

    def test_invalid_id(self, three_nodes):
        with pytest.raises(IndexError):
            neighbors(three_nodes, 3)

    def test_symmetry(self, rng):
        from conftest import random_graph
        g = random_graph(rng, 15, 30)
        for v in range(15):
            for u in neighbors(g, v):
                assert v in neighbors(g, u)


class TestGraphInvariants:
    def test_self_loop_rejected(self):
        with pytest.raises(ConfigError):
            KnowledgeGraph([ConceptNode(0, "a", "object", True, False)], [TypedEdge(0, 0, 0)], ["r"])

    def test_duplicate_edge_rejected(self):
        nodes = [ConceptNode(i, f"n{i}", "object", True, False) for i in range(2)]
        with pytest.raises(ConfigError):
            KnowledgeGraph(nodes, [TypedEdge(0, 1, 0), TypedEdge(0, 1, 0)], ["r"])

    def test_adjacency_consistent(self, three_nodes):
        for e in three_nodes.edges:
            assert (e.dst, e.edge_type) in three_nodes.out_edges[e.src]
            assert (e.src, e.edge_type) in three_nodes.in_edges[e.dst]
        assert sum(map(len, three_nodes.out_edges)) == three_nodes.num_edges


class TestFiles:
    def test_round_trip(self, tmp_path, three_nodes):
        save_graph(three_nodes, tmp_path / "g.txt")
        assert load_graph(tmp_path / "g.txt") == three_nodes

    def test_layout(self, three_nodes):
        assert dumps_graph(three_nodes).splitlines() == [
            "GSNN-GRAPH v1", "T\t0\tnear", "T\t1\ton",
            "N\t0\ta\tobject\t1\t1", "N\t1\tb\tobject\t1\t0", "N\t2\tc\tattribute\t1\t0",
            "E\t0\t1\ton", "E\t1\t0\tnear", "E\t1\t2\ton"]

    def test_version_mismatch(self, three_nodes):
        text = dumps_graph(three_nodes).replace("v1", "v2", 1)
        with pytest.raises(VersionError):
            loads_graph(text)

    def test_unknown_edge_type_names_line(self, three_nodes):
        text = dumps_graph(three_nodes).replace("E\t1\t2\ton", "E\t1\t2\tunder")
        with pytest.raises(ParseError, match="line 9"):
            loads_graph(text)

    def test_truncated(self, three_nodes):
        text = dumps_graph(three_nodes)
        with pytest.raises(ParseError):
            loads_graph(text[:-5])

    def test_316_node_fixture(self, tmp_path):
        from gsnn.synthdata import make_concept_graph
        g = make_concept_graph()
        save_graph(g, tmp_path / "g.txt")
        loaded = load_graph(tmp_path / "g.txt")
        assert loaded.num_nodes == 316
        assert len(loaded.detectable_ids) == 80
        assert loaded == g

    def test_read_cooccurrence(self):
        recs = list(read_cooccurrence(["# header", "grass\thas-attribute\tgreen\t450", "", "a\ton\tb\t3\n"]))
        assert recs == [R("grass", "has-attribute", "green", 450), R("a", "on", "b", 3)]

    @pytest.mark.parametrize("line", ["a\tb\tc", "a\ton\tb\tmany", "a\ton\tb\t-1"])
    def test_read_cooccurrence_errors(self, line):
        with pytest.raises(ParseError, match="line 2"):
            list(read_cooccurrence(["ok\ton\tfine\t1", line]))

    def test_read_taxonomy(self):
        assert list(read_taxonomy(["dog\tanimal", "cat\thypernym\tanimal", "animal\thyponym\tcow"])) == [
            ("dog", "animal"), ("cat", "animal"), ("cow", "animal")]
