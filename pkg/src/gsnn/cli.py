"""``gsnn`` command-line entry point.

Every run-time setting can also come from a ``key=value`` config file given
with ``--config`` or the ``GSNN_CONFIG`` environment variable; explicit flags
win over the file. Keys are the long flag names with underscores
(``epochs``, ``classifier_lr``...) plus dotted keys for the model sections:
``gsnn.<field>``, ``scene.<field>``, ``graph_opt.<field>`` and
``classifier_opt.<field>``. ``--set key=value`` sets any key from the
command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .benchmark import BenchConfig, format_records, scaling_benchmark
from .config import CONFIG_ENV_VAR, apply_overrides, read_config_file, write_config_file
from .errors import ConfigError, DimensionError, DomainError, NumericError, ParseError, StateError
from .evaluation import evaluate, format_lowdata_table, lowdata_sweep, sensitivity, write_report
from .kgraph import build_graph, fuse_taxonomy, load_graph, read_cooccurrence, read_taxonomy, save_graph
from .numeric import OptimizerConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    DEFAULT_CLASSIFIER_LR,
    DEFAULT_GRAPH_LR,
    BaselineModel,
    GsnnModel,
    TrainConfig,
    read_dataset,
    train,
)
from .search import GsnnConfig
from .synthdata import SceneModel, generate_dataset, make_concept_graph

log = logging.getLogger("gsnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_KINDS = ("gsnn", "feature", "feature+det")



class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------

def _settings(args):
    """Merge config file values and explicit flags; flags win."""
    values = {}
    path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(read_config_file(path))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for k, v in vars(args).items():
        if k in ("config", "set", "func", "command") or v is None:
            continue
        values[k] = v
    return values


def _get(values, key, default=None, cast=None):
    v = values.get(key, default)
    if v is None or cast is None:
        return v
    try:
        return cast(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {v!r}") from None


def _require(values, key):
    v = values.get(key)
    if v is None:
        raise UsageError(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    return v


def _gsnn_config(values):
    cfg = apply_overrides(GsnnConfig(), values, "gsnn.")
    direct = {k: values[k] for k in ("steps", "expand_per_step", "hidden_dim", "importance_weight", "dropout_rate")
              if values.get(k) is not None}
    return apply_overrides(cfg, direct)


def _train_config(values):
    graph_opt = OptimizerConfig(kind="adam", learning_rate=_get(values, "graph_lr", DEFAULT_GRAPH_LR, float))
    cls_opt = OptimizerConfig(learning_rate=_get(values, "classifier_lr", DEFAULT_CLASSIFIER_LR, float))
    return TrainConfig(epochs=_get(values, "epochs", 20, int), batch_size=_get(values, "batch_size", 16, int),
                       graph_optimizer=apply_overrides(graph_opt, values, "graph_opt."),
                       classifier_optimizer=apply_overrides(cls_opt, values, "classifier_opt."))


def _seed(values):
    seed = values.get("seed")
    if seed is None:
        raise UsageError("--seed is required for this command")
    return _get(values, "seed", cast=int)


def _read_lines(path):
    return [s.strip() for s in Path(path).read_text(encoding="utf-8").splitlines() if s.strip()]


# ---------------------------------------------------------------------------
# Models and checkpoints
# ---------------------------------------------------------------------------

def _meta_path(ckpt):
    return Path(str(ckpt) + ".meta")


def _make_model(kind, graph, image_dim, values, seed):
    if kind == "gsnn":
        return GsnnModel(graph, _gsnn_config(values), image_dim=image_dim, seed=seed)
    if kind in ("feature", "feature+det"):
        return BaselineModel(kind, len(graph.label_ids), image_dim, len(graph.detectable_ids), seed,
                             _get(values, "dropout_rate", 0.5, float))
    raise UsageError(f"unknown model {kind!r}; choose from {', '.join(MODEL_KINDS)}")


def _save_model(model, path):
    save_checkpoint(model.params, path)
    meta = {"model": model.kind, "image_dim": model.image_dim}
    if model.kind == "gsnn":
        meta.update({f"gsnn.{k}": v for k, v in vars(model.config).items()})
    else:
        meta["dropout_rate"] = model.dropout_rate
    write_config_file(meta, _meta_path(path))


def _load_model(path, graph):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta_path = _meta_path(path)
    if not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint metadata not found: {meta_path}")
    meta = read_config_file(meta_path)
    kind = meta.get("model")
    image_dim = int(meta.get("image_dim", 0))
    model = _make_model(kind, graph, image_dim, meta, 0)
    loaded = load_checkpoint(path)
    if sorted(loaded) != sorted(model.params):
        raise DimensionError(f"checkpoint parameters {sorted(loaded)} do not match a {kind} model")
    for n in loaded:
        if loaded[n].shape != model.params[n].shape:
            raise DimensionError(f"checkpoint {n} has shape {loaded[n].shape}, graph needs {model.params[n].shape}")
        model.params.values[n][...] = loaded[n]
    return model


def _check_dataset(examples, graph, what):
    if not examples:
        raise ParseError(f"{what} has no examples")
    ex = examples[0]
    if ex.labels.size != len(graph.label_ids):
        raise DimensionError(f"{what} has {ex.labels.size} labels, graph has {len(graph.label_ids)}")
    if ex.detections.size != len(graph.detectable_ids):
        raise DimensionError(f"{what} has {ex.detections.size} detections, graph has {len(graph.detectable_ids)}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build_graph(values):
    out = _require(values, "out")
    if values.get("synthetic"):
        graph = make_concept_graph(seed=_get(values, "seed", 0, int))
        dropped = 0
    else:
        records = list(read_cooccurrence(_require(values, "cooccurrence")))
        threshold = _get(values, "prune_threshold", 200, int)
        labels = _read_lines(values["labels"]) if values.get("labels") else None
        detectable = _read_lines(values["detectable"]) if values.get("detectable") else ()
        graph = build_graph(records, threshold, labels=labels, detectable=detectable)
        totals = Counter()
        for r in records:
            if r.concept_a != r.concept_b:
                totals[(r.concept_a, r.relation, r.concept_b)] += r.count
        dropped = sum(1 for c in totals.values() if c < threshold)
    if values.get("taxonomy"):
        graph, report = fuse_taxonomy(graph, read_taxonomy(values["taxonomy"]),
                                      bool(values.get("bidirectional_taxonomy")))
        print(f"taxonomy: nodes_added={report.nodes_added} edges_added={report.edges_added} "
              f"edges_dropped={report.edges_dropped}")
    save_graph(graph, out)
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} edge_types={len(graph.edge_types)} "
          f"labels={len(graph.label_ids)} detectable={len(graph.detectable_ids)} relations_pruned={dropped}")


def cmd_gen_data(values):
    graph = load_graph(_require(values, "graph"))
    scene = apply_overrides(SceneModel(graph), values, "scene.")
    if values.get("feature_dim") is not None:
        scene = apply_overrides(scene, {"feature_dim": values["feature_dim"]})
    train_path, test_path = generate_dataset(scene, _get(values, "n_train", 5000, int), _get(values, "n_test", 1000, int),
                                             _seed(values), _require(values, "out"))
    print(f"wrote {train_path} and {test_path}")


def cmd_train(values):
    graph = load_graph(_require(values, "graph"))
    examples = read_dataset(_require(values, "data"))
    _check_dataset(examples, graph, "training data")
    seed = _seed(values)
    model = _make_model(_get(values, "model", "gsnn"), graph, examples[0].image_feature.size, values, seed)
    out = Path(_require(values, "out"))
    lines = []

    def on_epoch(stats):
        line = f"epoch={stats['epoch']} loss={stats['loss']!r} bce={stats['bce']!r} importance={stats['importance']!r}"
        lines.append(line)
        print(line, flush=True)

    train(model, examples, _train_config(values), seed, on_epoch)
    _save_model(model, out)
    Path(str(out) + ".log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out}")


def cmd_eval(values):
    graph = load_graph(_require(values, "graph"))
    examples = read_dataset(_require(values, "data"))
    _check_dataset(examples, graph, "evaluation data")
    model = _load_model(_require(values, "checkpoint"), graph)
    baseline = _load_model(values["baseline"], graph) if values.get("baseline") else None
    names = [graph.name(v) for v in graph.label_ids]
    report = evaluate(model, examples, baseline=baseline, name=model.kind, category_names=names)
    if baseline is not None:
        report.baseline = baseline.kind
    print(f"model={report.name} mAP={report.mAP:.6f}")
    if report.baseline is not None:
        best, worst = report.top_deltas(5)
        print(f"baseline={report.baseline} mean_delta={np.nanmean(report.per_category_delta):.6f}")
        print("most improved: " + ", ".join(f"{n} {d:+.4f}" for n, d in best))
        print("most degraded: " + ", ".join(f"{n} {d:+.4f}" for n, d in worst))
    if values.get("out"):
        write_report(report, values["out"])


def cmd_sensitivity(values):
    graph = load_graph(_require(values, "graph"))
    examples = read_dataset(_require(values, "data"))
    _check_dataset(examples, graph, "data")
    model = _load_model(_require(values, "checkpoint"), graph)
    if model.kind != "gsnn":
        raise UsageError("sensitivity needs a gsnn checkpoint")
    index = _get(values, "index", 0, int)
    if not 0 <= index < len(examples):
        raise UsageError(f"example index {index} out of range [0, {len(examples)})")
    label = str(_require(values, "label"))
    names = [graph.name(v) for v in graph.label_ids]
    target = names.index(label) if label in names else _get(values, "label", cast=int)
    table = sensitivity(model, examples[index], target)
    text = table.to_tsv(_get(values, "top", 10, int))
    if values.get("out"):
        Path(values["out"]).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_bench(values):
    sizes = tuple(int(s) for s in str(_get(values, "sizes", "100,250,500,1000,2000,5000")).split(","))
    cfg = BenchConfig(sizes=sizes, trials=_get(values, "trials", 20, int), seed=_get(values, "seed", 0, int),
                      gsnn=_gsnn_config(values))
    if cfg.trials < 1:
        raise UsageError("--trials must be >= 1")
    records, exps = scaling_benchmark(cfg, threads=1, progress=lambda r: print(
        f"{r.mode}\tN={r.num_nodes}\tmedian={r.median_seconds:.6g}s\tmin={r.min_seconds:.6g}s", flush=True))
    text = format_records(records, exps)
    if values.get("out"):
        Path(values["out"]).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_lowdata(values):
    graph = load_graph(_require(values, "graph"))
    train_set = read_dataset(_require(values, "data"))
    test_set = read_dataset(_require(values, "test"))
    _check_dataset(train_set, graph, "training data")
    _check_dataset(test_set, graph, "test data")
    sizes = [int(s) for s in str(_require(values, "sizes")).split(",")]
    kinds = str(_get(values, "models", ",".join(MODEL_KINDS))).split(",")
    image_dim = train_set[0].image_feature.size
    factories = {k: (lambda s, k=k: _make_model(k, graph, image_dim, values, s)) for k in kinds}
    for k in kinds:
        factories[k](0)  # validates the names before any training
    rows = lowdata_sweep(train_set, test_set, sizes, factories, _train_config(values), _seed(values))
    text = format_lowdata_table(rows)
    if values.get("out"):
        Path(values["out"]).write_text(text, encoding="utf-8")
    print(text, end="")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV_VAR})")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="set any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on BLAS threads (1 = deterministic reference mode)")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _model_flags(p):
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--classifier-lr", type=float)
    p.add_argument("--graph-lr", type=float)
    p.add_argument("--steps", type=int, help="propagation steps T")
    p.add_argument("--expand-per-step", type=int, help="nodes expanded per round P")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--importance-weight", type=float)
    p.add_argument("--dropout-rate", type=float)


def build_parser():
    parser = _Parser(prog="gsnn", description="Graph search network toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("build-graph", help="build a pruned knowledge graph file")
    _common(p)
    p.add_argument("--cooccurrence", help="TSV: concept_a, relation, concept_b, count")
    p.add_argument("--synthetic", action="store_true", default=None, help="build the 316-concept synthetic graph")
    p.add_argument("--taxonomy", help="TSV of child/parent is-a pairs to fuse")
    p.add_argument("--bidirectional-taxonomy", action="store_true", default=None)
    p.add_argument("--prune-threshold", type=int, help="minimum relation count (default 200)")
    p.add_argument("--labels", help="file with one output-label concept per line (default: all)")
    p.add_argument("--detectable", help="file with one detectable concept per line")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-data", help="sample a synthetic train/test dataset")
    _common(p)
    p.add_argument("--graph")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    _model_flags(p)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-category AP and mAP of a checkpoint")
    _common(p)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="checkpoint to report per-category deltas against")
    p.add_argument("--out", help="report path prefix (.tsv and .summary)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sensitivity", help="derivatives of one label w.r.t. hidden states and detections")
    _common(p)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--index", type=int, help="example index (default 0)")
    p.add_argument("--label", help="label name or index")
    p.add_argument("--top", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("bench", help="dense vs search propagation timing sweep")
    _common(p)
    p.add_argument("--sizes", help="comma-separated node counts (default 100,250,500,1000,2000,5000)")
    p.add_argument("--trials", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lowdata", help="test mAP against training-set size")
    _common(p)
    _model_flags(p)
    p.add_argument("--graph")
    p.add_argument("--data", help="training dataset")
    p.add_argument("--test")
    p.add_argument("--sizes", help="comma-separated, descending")
    p.add_argument("--models", help="comma-separated subset of gsnn,feature,feature+det")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lowdata)
    return parser


def _threads(values):
    n = values.get("threads")
    if n is None:
        return contextlib.nullcontext()
    n = _get(values, "threads", cast=int)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = _settings(args)
        with _threads(values):
            args.func(values)
    except UsageError as exc:
        print(f"gsnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"gsnn {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"gsnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, DimensionError, DomainError, StateError, OSError, IndexError) as exc:
        print(f"gsnn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
