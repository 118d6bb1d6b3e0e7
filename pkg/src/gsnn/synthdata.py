"""Synthetic scenes whose label correlations follow a knowledge graph.

Labels are seeded independently, then one relaxation pass adds each graph
neighbour of a seeded label with a fixed probability, so co-occurrence
structure is exactly the graph's. Detections are noisy, partially missed
indicators of the detectable labels, and the image feature is a fixed random
projection of the label vector plus noise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import substream
from .errors import ConfigError
from .kgraph import ATTRIBUTE_RELATION, CooccurrenceRecord, KnowledgeGraph, build_graph
from .pipeline import Example, write_dataset

OBJECT_RELATIONS = ("has", "near", "on", "wearing")


@dataclass
class SceneModel:
    graph: KnowledgeGraph
    seed_concept_prob: float = 0.01
    neighbor_inclusion_prob: float = 0.5
    detection_noise: float = 0.2
    detector_miss_rate: float = 0.2
    feature_dim: int = 64
    feature_noise: float = 0.5

    def __post_init__(self):
        for name in ("seed_concept_prob", "neighbor_inclusion_prob", "detector_miss_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.detection_noise < 0 or self.feature_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        g = self.graph
        if not g.label_ids:
            raise ConfigError("graph has no output labels")
        pos = {v: i for i, v in enumerate(g.label_ids)}
        # Ordered (seed, neighbour) label pairs; one inclusion coin per pair.
        pairs = [(pos[v], pos[u]) for v in g.label_ids for u in sorted(g._neighbors[v]) if u in pos]
        self._pair_src = np.array([a for a, _ in pairs], dtype=np.intp)
        self._pair_dst = np.array([b for _, b in pairs], dtype=np.intp)
        self._det_pos = np.array([pos[v] for v in g.detectable_ids], dtype=np.intp)

    @property
    def num_labels(self):
        return len(self.graph.label_ids)

    def label_degree(self):
        return np.bincount(self._pair_dst, minlength=self.num_labels)

    def label_marginals(self):
        """Closed-form P(label present): not seeded and not pulled in by any
        seeded neighbour fails with (1 - s) * (1 - s q)^deg."""
        s, q = self.seed_concept_prob, self.neighbor_inclusion_prob
        return 1.0 - (1.0 - s) * (1.0 - s * q) ** self.label_degree()

    def projection(self, seed):
        rng = substream(seed, "projection")
        return rng.normal(size=(self.feature_dim, self.num_labels)) / np.sqrt(self.num_labels)

    def params(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "graph"}


def sample_scene(model, rng, projection=None):
    """Draw one :class:`~gsnn.pipeline.Example`. A fixed number of variates
    is consumed per call so sequential streams stay aligned."""
    if projection is None:
        projection = model.projection(0)
    L = model.num_labels
    seeded = rng.random(L) < model.seed_concept_prob
    coins = rng.random(model._pair_src.size) < model.neighbor_inclusion_prob
    labels = seeded.copy()
    pulled = model._pair_dst[seeded[model._pair_src] & coins]
    labels[pulled] = True
    labels = labels.astype(np.float64)

    truth = labels[model._det_pos]
    hit = rng.random(truth.size) >= model.detector_miss_rate
    noise = rng.normal(size=truth.size) * model.detection_noise
    detections = np.clip(truth * hit + noise, 0.0, 1.0)

    feature = projection @ labels + rng.normal(size=model.feature_dim) * model.feature_noise
    return Example(detections, feature, labels)


def sample_examples(model, n, seed, split="train"):
    rng = substream(seed, f"data/{split}")
    proj = model.projection(seed)
    return [sample_scene(model, rng, proj) for _ in range(n)]


def generate_dataset(model, n_train, n_test, seed, path):
    """Write ``train.txt``, ``test.txt`` and ``manifest.txt`` under ``path``.

    Train and test draw from separate streams, so the first ``k`` training
    lines do not depend on ``n_train``.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(sample_examples(model, n_train, seed, "train"), out / "train.txt")
    write_dataset(sample_examples(model, n_test, seed, "test"), out / "test.txt")
    manifest = {"seed": seed, "n_train": n_train, "n_test": n_test,
                "graph_nodes": model.graph.num_nodes, "graph_edges": model.graph.num_edges,
                "num_labels": model.num_labels, "num_detectable": len(model.graph.detectable_ids)}
    manifest.update(model.params())
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return out / "train.txt", out / "test.txt"


def synthetic_cooccurrence(num_objects=216, num_attributes=100, relations_per_object=3,
                           attributes_per_object=1, seed=0, keep_fraction=0.8):
    """Co-occurrence records over ``obj_NNN`` / ``attr_NNN`` concepts.

    About ``keep_fraction`` of the relations get counts at or above 200 and
    survive the default pruning threshold; the rest are rare (< 200).
    """
    rng = substream(seed, "cooccurrence")
    objects = [f"obj_{i:03d}" for i in range(num_objects)]
    attrs = [f"attr_{i:03d}" for i in range(num_attributes)]
    records = []

    def count():
        return int(rng.integers(200, 2000)) if rng.random() < keep_fraction else int(rng.integers(1, 200))

    for i, a in enumerate(objects):
        partners = rng.choice(num_objects - 1, size=relations_per_object, replace=False)
        for j in partners:
            b = objects[j if j < i else j + 1]
            records.append(CooccurrenceRecord(a, str(rng.choice(OBJECT_RELATIONS)), b, count()))
        for j in rng.choice(num_attributes, size=attributes_per_object, replace=False):
            records.append(CooccurrenceRecord(a, ATTRIBUTE_RELATION, attrs[j], count()))
    # Every attribute gets at least one common owner so the vocabulary is complete.
    for j, attr in enumerate(attrs):
        owner = objects[int(rng.integers(num_objects))]
        records.append(CooccurrenceRecord(owner, ATTRIBUTE_RELATION, attr, int(rng.integers(200, 2000))))
    return records, objects, attrs


def make_concept_graph(num_objects=216, num_attributes=100, num_detectable=80, seed=0, **kwargs):
    """A pruned co-occurrence graph whose every concept is an output label;
    ``num_detectable`` objects (chosen by ``seed``) are detectable."""
    records, objects, attrs = synthetic_cooccurrence(num_objects, num_attributes, seed=seed, **kwargs)
    rng = substream(seed, "detectable")
    detectable = sorted(rng.choice(objects, size=num_detectable, replace=False).tolist())
    return build_graph(records, 200, labels=objects + attrs, detectable=detectable, attributes=attrs)
