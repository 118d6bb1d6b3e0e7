"""Ranking metrics, evaluation reports, sensitivity analysis and the
training-set-size sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .pipeline import classify, classify_backward, predict, train

AP_VARIANT = "mean precision at each positive rank; ties ranked by index; no interpolation"


def average_precision(scores, labels):
    """Mean over positives of the precision at the positive's rank.

    Items are ranked by descending score with ties broken by ascending index.
    Returns NaN when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    npos = int(labels.sum())
    if npos == 0:
        return math.nan
    ranked = labels[np.argsort(-scores, kind="stable")]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.size + 1)
    return float(np.sum(hits[ranked] / ranks[ranked]) / npos)


def per_category_ap(scores, labels):
    """AP per column of an (examples x categories) score matrix."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return np.array([average_precision(scores[:, j], labels[:, j]) for j in range(scores.shape[1])])


def mean_average_precision(scores, labels):
    """mAP over categories with at least one positive."""
    ap = per_category_ap(scores, labels)
    valid = ~np.isnan(ap)
    return float(ap[valid].mean()) if valid.any() else math.nan


@dataclass
class EvalReport:
    name: str
    mAP: float
    per_category_ap: np.ndarray
    baseline: str | None = None
    per_category_delta: np.ndarray | None = None
    category_names: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    sensitivities: list = field(default_factory=list)
    metadata: dict = field(default_factory=lambda: {"ap_variant": AP_VARIANT})

    def top_deltas(self, k=5):
        """``(best, worst)`` categories by AP change against the baseline."""
        if self.per_category_delta is None:
            return [], []
        d = np.where(np.isnan(self.per_category_delta), 0.0, self.per_category_delta)
        order = np.argsort(-d, kind="stable")
        names = self.category_names or [str(i) for i in range(d.size)]
        best = [(names[i], float(d[i])) for i in order[:k]]
        worst = [(names[i], float(d[i])) for i in order[::-1][:k]]
        return best, worst


def evaluate(model, examples, baseline=None, name=None, category_names=None):
    """Eval-mode predictions on ``examples`` scored per category.

    ``baseline`` may be another model or an :class:`EvalReport`; its
    per-category AP is subtracted to give ``per_category_delta``.
    """
    if not examples:
        raise ConfigError("no examples to evaluate")
    if examples[0].labels.size != model.num_labels:
        raise DimensionError(f"dataset has {examples[0].labels.size} labels, model predicts {model.num_labels}")
    scores = predict(model, examples)
    labels = np.stack([ex.labels for ex in examples])
    ap = per_category_ap(scores, labels)
    valid = ~np.isnan(ap)
    report = EvalReport(name or getattr(model, "kind", "model"), float(ap[valid].mean()) if valid.any() else math.nan,
                        ap, category_names=list(category_names or []))
    if baseline is not None:
        base = baseline if isinstance(baseline, EvalReport) else evaluate(baseline, examples)
        report.baseline = base.name
        report.per_category_delta = ap - base.per_category_ap
    return report


def write_report(report, path):
    """Write ``<path>.tsv`` (per-category table) and ``<path>.summary`` (key=value)."""
    path = Path(path)
    names = report.category_names or [str(i) for i in range(report.per_category_ap.size)]
    rows = ["index\tcategory\tap\tdelta"]
    for i, ap in enumerate(report.per_category_ap):
        d = "" if report.per_category_delta is None else repr(float(report.per_category_delta[i]))
        rows.append(f"{i}\t{names[i]}\t{float(ap)!r}\t{d}")
    path.with_suffix(".tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    summary = {"model": report.name, "mAP": repr(report.mAP), "categories": report.per_category_ap.size,
               "categories_with_positives": int((~np.isnan(report.per_category_ap)).sum())}
    if report.baseline is not None:
        summary["baseline"] = report.baseline
        summary["mean_delta"] = repr(float(np.nanmean(report.per_category_delta)))
    summary.update(report.metadata)
    path.with_suffix(".summary").write_text("".join(f"{k}={v}\n" for k, v in summary.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------

@dataclass
class SensitivityTable:
    label: int
    label_name: str
    probability: float
    # hidden[t][v]: norm of dy/dh_v for the state entering step t (last row: final state).
    hidden: np.ndarray
    detections: np.ndarray
    node_names: list
    detector_names: list
    expanded_edges: list

    def ranked_hidden(self, t, k=None):
        order = np.argsort(-self.hidden[t], kind="stable")[:k]
        return [(self.node_names[i], float(self.hidden[t, i])) for i in order]

    def ranked_detections(self, k=None):
        order = np.argsort(-np.abs(self.detections), kind="stable")[:k]
        return [(self.detector_names[i], float(self.detections[i])) for i in order]

    def to_tsv(self, k=10):
        lines = [f"# label\t{self.label_name}\tprobability\t{self.probability!r}"]
        lines.append("section\trank\tname\tvalue")
        for r, (n, v) in enumerate(self.ranked_detections(k)):
            lines.append(f"detection\t{r}\t{n}\t{v!r}")
        for t in range(self.hidden.shape[0]):
            for r, (n, v) in enumerate(self.ranked_hidden(t, k)):
                lines.append(f"hidden_t{t + 1}\t{r}\t{n}\t{v!r}")
        for a, rel, b in self.expanded_edges:
            lines.append(f"edge\t-\t{a} {rel} {b}\t")
        return "\n".join(lines) + "\n"


def sensitivity(model, example, target_label):
    """Derivatives of one label probability w.r.t. every hidden state and
    detection score, from a single eval-mode forward pass.

    Expansion choices are constants of the forward pass. Overwrites the
    model's gradient buffers.
    """
    graph = model.graph
    if not 0 <= target_label < model.num_labels:
        raise IndexError(f"label index {target_label} out of range [0, {model.num_labels})")
    model.params.zero_grad()
    fwd = model.forward(example, "eval")
    probs, mask = classify(fwd.features[None, :], model.params, "eval")
    dprobs = np.zeros_like(probs)
    dprobs[0, target_label] = 1.0
    dfeats = classify_backward(dprobs, probs, fwd.features[None, :], mask, model.params)[0]
    dstates, dX = model.backward_graph(fwd, dfeats, None)
    res = fwd.gsnn
    sub = res.subgraph

    hidden = np.zeros((len(dstates), graph.num_nodes))
    for t, d in enumerate(dstates):
        rows = d.shape[0]
        hidden[t, sub.nodes[:rows]] = np.linalg.norm(d, axis=1)

    K = len(graph.detectable_ids)
    ddet = dfeats[-K:].copy() if K else np.zeros(0)
    if not model.config.binary_annotation:
        det_pos = {v: i for i, v in enumerate(graph.detectable_ids)}
        for v in sub.detected:
            ddet[det_pos[v]] += dX[sub.local[v], 0]
    label_node = graph.label_ids[target_label]
    return SensitivityTable(
        target_label, graph.name(label_node), float(probs[0, target_label]), hidden, ddet,
        [n.name for n in graph.nodes], [graph.name(v) for v in graph.detectable_ids], sub.expanded_edges())


# ---------------------------------------------------------------------------
# Training-set-size sweep
# ---------------------------------------------------------------------------

def lowdata_sweep(train_examples, test_examples, sizes, model_factories, train_config, seed=0):
    """Train every model variant on each training prefix and report test mAP.

    ``model_factories`` maps a variant name to ``factory(seed) -> model``;
    each (size, variant) starts from a fresh initialisation. Returns rows
    ``(size, variant, mAP)``.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes, reverse=True):
        raise ConfigError("sizes must be sorted in descending order")
    if sizes and sizes[0] > len(train_examples):
        raise ConfigError(f"size {sizes[0]} exceeds the {len(train_examples)} available training examples")
    rows = []
    for size in sizes:
        subset = train_examples[:size]
        for name, factory in model_factories.items():
            model = factory(seed)
            train(model, subset, train_config, seed)
            rows.append((size, name, evaluate(model, test_examples).mAP))
    return rows


def format_lowdata_table(rows):
    names = list(dict.fromkeys(r[1] for r in rows))
    sizes = list(dict.fromkeys(r[0] for r in rows))
    table = {(s, n): m for s, n, m in rows}
    lines = ["size\t" + "\t".join(names)]
    for s in sizes:
        lines.append(f"{s}\t" + "\t".join(f"{table[(s, n)]:.6f}" for n in names))
    return "\n".join(lines) + "\n"
