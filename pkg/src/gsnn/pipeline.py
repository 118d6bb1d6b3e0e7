"""Multi-label classification pipeline around the graph search network.

Per example: run the search network from the detections, lay the per-node
outputs out in canonical node order (zeros for inactive nodes), append the
image feature and the raw detection scores, and feed the result through a
one-layer sigmoid classifier with dropout. Two graph-free baselines share the
same classifier: image feature only, and image feature plus detections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import substream
from .errors import DimensionError, NumericError, ParseError, VersionError
from .numeric import (
    OptimizerConfig,
    ParameterSet,
    bce_backward,
    bce_loss,
    dropout_backward,
    dropout_forward,
    init_uniform,
    mse_backward,
    mse_loss,
    optimizer_step,
    sigmoid,
    sigmoid_backward,
)
from .propagation import PROPAGATION_PREFIXES, ModelDims, init_propagation_params
from .search import GsnnConfig, gsnn_backward, importance_targets, run_gsnn

log = logging.getLogger(__name__)

DATA_MAGIC = "GSNN-DATA"
# The classifier loss is a mean over labels, so its gradients are about
# 1/num_labels the size of a summed loss; this rate compensates.
DEFAULT_CLASSIFIER_LR = 10.0
DEFAULT_GRAPH_LR = 0.05
DATA_VERSION = 1


@dataclass
class Example:
    detections: np.ndarray
    image_feature: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.detections = np.asarray(self.detections, dtype=np.float64)
        self.image_feature = np.asarray(self.image_feature, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def format_example(ex):
    det = ",".join(repr(float(v)) for v in ex.detections)
    feat = ",".join(repr(float(v)) for v in ex.image_feature)
    bits = "".join("1" if v else "0" for v in ex.labels)
    return f"{det}|{feat}|{bits}"


def write_dataset(examples, path):
    lines = [f"{DATA_MAGIC} v{DATA_VERSION}"]
    lines.extend(format_example(ex) for ex in examples)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _floats(text):
    return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(" ")
        if len(header) != 2 or header[0] != DATA_MAGIC:
            raise ParseError("missing dataset header", line=1, path=path)
        if header[1] != f"v{DATA_VERSION}":
            raise VersionError(f"unsupported dataset version {header[1]}", line=1, path=path)
        examples = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3:
                raise ParseError("expected 'detections|feature|labels'", line=lineno, path=path)
            try:
                det, feat = _floats(parts[0]), _floats(parts[1])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if set(parts[2]) - {"0", "1"}:
                raise ParseError("label bits must be 0/1", line=lineno, path=path)
            labels = np.array([c == "1" for c in parts[2]], dtype=np.float64)
            if examples and (det.size, feat.size, labels.size) != (
                    examples[0].detections.size, examples[0].image_feature.size, examples[0].labels.size):
                raise ParseError("example dimensions differ from the first example", line=lineno, path=path)
            examples.append(Example(det, feat, labels))
    return examples


# ---------------------------------------------------------------------------
# Features and classifier
# ---------------------------------------------------------------------------

def assemble_features(outputs, graph, image_feature, detections, out_dim=None):
    """Concatenate canonical-order node outputs (zero for inactive nodes),
    the image feature and the detection scores.

    ``outputs`` maps node id to its output vector.
    """
    if out_dim is None:
        out_dim = len(next(iter(outputs.values()))) if outputs else 0
    block = np.zeros((graph.num_nodes, out_dim))
    for v, o in outputs.items():
        block[v] = o
    return np.concatenate([block.ravel(), np.asarray(image_feature, float), np.asarray(detections, float)])


def classify(features, params, mode="eval", rng=None, dropout_rate=0.5):
    """Label probabilities ``sigmoid(W dropout(f) + b)``; rows of ``features``
    are independent examples. Returns ``(probs, mask)``."""
    W, b = params["cls.weight"], params["cls.bias"]
    if np.shape(features)[-1] != W.shape[1]:
        raise DimensionError(f"classifier expects {W.shape[1]} features, got {np.shape(features)[-1]}")
    f, mask = dropout_forward(features, dropout_rate, mode, rng)
    return sigmoid(f @ W.T + b), mask


def classify_backward(dprobs, probs, features, mask, params):
    """Accumulate classifier gradients; return dL/dfeatures."""
    dpre = sigmoid_backward(dprobs, probs)
    f = features * mask
    params.accumulate("cls.weight", dpre.T @ f if dpre.ndim == 2 else np.outer(dpre, f))
    params.accumulate("cls.bias", dpre.sum(axis=0) if dpre.ndim == 2 else dpre)
    return dropout_backward(dpre @ params["cls.weight"], mask)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    graph_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(kind="adam", learning_rate=DEFAULT_GRAPH_LR))
    classifier_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=DEFAULT_CLASSIFIER_LR))


@dataclass
class Forward:
    """Everything one example's forward pass needs to be backpropagated."""

    features: np.ndarray
    gsnn: object = None


class BaselineModel:
    """Classifier on the image feature (``"feature"``) or on the image
    feature plus detection scores (``"feature+det"``)."""

    def __init__(self, kind, num_labels, image_dim, num_detections, seed=0, dropout_rate=0.5):
        if kind not in ("feature", "feature+det"):
            raise ValueError(f"unknown baseline {kind!r}")
        self.kind = kind
        self.num_labels = num_labels
        self.image_dim = image_dim
        self.dropout_rate = dropout_rate
        self.feature_dim = image_dim + (num_detections if kind == "feature+det" else 0)
        self.params = ParameterSet()
        _init_classifier(self.params, num_labels, self.feature_dim, substream(seed, "init"))

    def forward(self, example, mode="eval", trace=None):
        if self.kind == "feature":
            f = example.image_feature
        else:
            f = np.concatenate([example.image_feature, example.detections])
        return Forward(f)

    def backward_graph(self, fwd, dfeatures, d_scores=None):
        pass

    def importance_loss(self, fwd, example):
        return 0.0, None

    def graph_param_names(self):
        return []


class GsnnModel:
    """Graph search network feeding the final classifier."""

    kind = "gsnn"

    def __init__(self, graph, config=None, image_dim=0, seed=0):
        self.graph = graph
        self.config = config or GsnnConfig()
        self.num_labels = len(graph.label_ids)
        self.image_dim = image_dim
        self.dropout_rate = self.config.dropout_rate
        self.num_detections = len(graph.detectable_ids)
        self.feature_dim = graph.num_nodes * self.config.out_dim + image_dim + self.num_detections
        self.params = ParameterSet()
        rng = substream(seed, "init")
        dims = ModelDims(hidden_dim=self.config.hidden_dim, annotation_dim=1, out_dim=self.config.out_dim,
                         num_edge_types=len(graph.edge_types), num_nodes=graph.num_nodes)
        init_propagation_params(self.params, dims, rng)
        _init_classifier(self.params, self.num_labels, self.feature_dim, rng)
        self._label_ids = np.asarray(graph.label_ids, dtype=np.intp)

    def forward(self, example, mode="eval", trace=None):
        res = run_gsnn(self.graph, example.detections, self.params, self.config, trace)
        O = self.config.out_dim
        block = np.zeros((self.graph.num_nodes, O))
        if res.nodes:
            block[res.nodes] = res.outputs
        f = np.concatenate([block.ravel(), example.image_feature, example.detections])
        return Forward(f, res)

    def backward_graph(self, fwd, dfeatures, d_scores=None):
        res = fwd.gsnn
        O = self.config.out_dim
        dblock = dfeatures[: self.graph.num_nodes * O].reshape(-1, O)
        return gsnn_backward(res, self.params, dblock[res.nodes], d_scores)

    def importance_loss(self, fwd, example):
        """Summed per-round MSE of logged importance scores against hop targets."""
        log_ = fwd.gsnn.subgraph.importance_log
        if not log_:
            return 0.0, None
        positives = self._label_ids[example.labels > 0.5]
        targets = importance_targets(self.graph, positives, self.config.importance_discount,
                                     self.config.importance_max_hops)
        nodes = np.asarray(fwd.gsnn.nodes, dtype=np.intp)
        lam = self.config.importance_weight
        loss, grads = 0.0, []
        for r in log_:
            t = targets[nodes[: r.num_scored]]
            loss += lam * mse_loss(r.scores, t)
            grads.append(lam * mse_backward(r.scores, t))
        return loss, grads

    def graph_param_names(self):
        return [n for n in self.params if n.startswith(PROPAGATION_PREFIXES)]


def _init_classifier(params, num_labels, feature_dim, rng):
    params.add("cls.weight", init_uniform(rng, num_labels, feature_dim))
    params.add("cls.bias", np.zeros((1, num_labels)))


def predict(model, examples, batch_size=256):
    """Eval-mode label probabilities, one row per example."""
    out = []
    for i in range(0, len(examples), batch_size):
        feats = np.stack([model.forward(ex, "eval").features for ex in examples[i:i + batch_size]])
        out.append(classify(feats, model.params, "eval")[0])
    return np.concatenate(out) if out else np.zeros((0, model.num_labels))


def batch_loss_and_grad(model, batch, rng=None, mode="train", traces=None, with_importance=True):
    """Forward and backward over a batch; gradients (of the batch-mean loss)
    are accumulated into ``model.params`` after zeroing them.

    Returns ``(total_loss, bce, importance_loss, forwards)``.
    """
    params = model.params
    params.zero_grad()
    fwds = [model.forward(ex, mode, None if traces is None else traces[i]) for i, ex in enumerate(batch)]
    feats = np.stack([f.features for f in fwds])
    labels = np.stack([ex.labels for ex in batch])
    probs, mask = classify(feats, params, mode, rng, model.dropout_rate)
    B = len(batch)
    bce = float(np.mean([bce_loss(probs[i], labels[i]) for i in range(B)]))
    dprobs = np.stack([bce_backward(probs[i], labels[i]) for i in range(B)]) / B
    dfeats = classify_backward(dprobs, probs, feats, mask, params)
    imp_total = 0.0
    for i, (fwd, ex) in enumerate(zip(fwds, batch)):
        d_scores = None
        if with_importance:
            imp, grads = model.importance_loss(fwd, ex)
            imp_total += imp / B
            if grads is not None:
                d_scores = [g / B for g in grads]
        model.backward_graph(fwd, dfeats[i], d_scores)
    total = bce + imp_total
    if not np.isfinite(total):
        raise NumericError("loss", f"non-finite loss (bce={bce}, importance={imp_total})")
    return total, bce, imp_total, fwds


def train_step(model, batch, train_config, epoch, rng):
    """One optimizer update on ``batch``; the graph network and the classifier
    use their own optimizer settings."""
    total, bce, imp, _ = batch_loss_and_grad(model, batch, rng, "train")
    graph_names = model.graph_param_names()
    if graph_names:
        optimizer_step(model.params, train_config.graph_optimizer, epoch, graph_names)
    optimizer_step(model.params, train_config.classifier_optimizer, epoch, model.params.names("cls."))
    return {"loss": total, "bce": bce, "importance": imp}


def train(model, examples, train_config, seed=0, callback=None):
    """Minibatch training; the example order is reshuffled every epoch from
    the ``shuffle`` stream. Returns per-epoch mean losses."""
    order_rng = substream(seed, "shuffle")
    drop_rng = substream(seed, "dropout")
    history = []
    n = len(examples)
    for epoch in range(train_config.epochs):
        order = order_rng.permutation(n)
        sums = {"loss": 0.0, "bce": 0.0, "importance": 0.0}
        batches = 0
        for start in range(0, n, train_config.batch_size):
            batch = [examples[i] for i in order[start:start + train_config.batch_size]]
            stats = train_step(model, batch, train_config, epoch, drop_rng)
            for k in sums:
                sums[k] += stats[k]
            batches += 1
        means = {k: v / max(batches, 1) for k, v in sums.items()}
        means["epoch"] = epoch
        history.append(means)
        log.info("epoch %d loss %.6f bce %.6f importance %.6f", epoch, means["loss"], means["bce"], means["importance"])
        if callback is not None:
            callback(means)
    return history
