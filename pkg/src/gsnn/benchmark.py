"""Timing of full-graph versus searched-subgraph propagation as the graph grows.

Both modes run a forward and backward pass with the same parameters on the
same random graph. The dense mode propagates over every node with an
``(E, N, N)`` adjacency; the search mode touches only the active subgraph,
whose size is fixed by the detections and the expansion budget.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .config import substream
from .kgraph import ConceptNode, KnowledgeGraph, TypedEdge
from .numeric import ParameterSet
from .propagation import ModelDims, init_propagation_params
from .search import DenseGGNN, GsnnConfig, gsnn_backward, run_gsnn

DEFAULT_SIZES = (100, 250, 500, 1000, 2000, 5000)
MODES = ("dense", "gsnn")


@dataclass
class BenchConfig:
    sizes: tuple = DEFAULT_SIZES
    trials: int = 20
    average_degree: float = 6.0
    num_edge_types: int = 3
    num_detectable: int = 4
    dense_max_bytes: int = 2 * 1024 ** 3
    seed: int = 0
    gsnn: GsnnConfig = field(default_factory=GsnnConfig)


@dataclass
class TimingRecord:
    mode: str
    num_nodes: int
    num_edges: int
    trials: int
    median_seconds: float
    mean_seconds: float
    min_seconds: float = float("nan")
    capped: bool = False
    note: str = ""


def random_graph(num_nodes, average_degree, num_edge_types, num_detectable, rng):
    """Erdos-Renyi style graph with about ``average_degree * N / 2`` directed,
    randomly typed edges. The first ``num_detectable`` nodes are detectable."""
    n = int(num_nodes)
    target = int(round(average_degree * n / 2)) if n > 1 else 0
    target = min(target, n * (n - 1))
    edges = set()
    while len(edges) < target:
        need = target - len(edges)
        s = rng.integers(n, size=2 * need)
        d = rng.integers(n, size=2 * need)
        t = rng.integers(num_edge_types, size=2 * need)
        for a, b, e in zip(s.tolist(), d.tolist(), t.tolist()):
            if a != b and len(edges) < target:
                edges.add(TypedEdge(a, b, e))
    k = min(num_detectable, n)
    nodes = [ConceptNode(i, f"n{i:05d}", "object", i < k, i < k) for i in range(n)]
    return KnowledgeGraph(nodes, edges, [f"rel{e}" for e in range(num_edge_types)])


def _params(graph, config, rng):
    p = ParameterSet()
    dims = ModelDims(config.hidden_dim, 1, config.out_dim, len(graph.edge_types), graph.num_nodes)
    init_propagation_params(p, dims, rng)
    return p


def _time(fn, trials, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


def time_mode(mode, graph, params, config, detections, trials):
    """Per-trial seconds for one forward plus backward pass."""
    if mode == "dense":
        model = DenseGGNN(graph, params, config)

        def step():
            out = model.forward(detections)
            model.backward(np.ones_like(out))
    elif mode == "gsnn":
        def step():
            res = run_gsnn(graph, detections, params, config)
            gsnn_backward(res, params, np.ones_like(res.outputs))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _time(step, trials)


def fit_exponent(sizes, seconds):
    """Slope of ``log(seconds)`` against ``log(N)`` by least squares."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(seconds, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _pinned(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def scaling_benchmark(config=None, modes=MODES, threads=1, progress=None):
    """Run the sweep; returns ``(records, exponents)``.

    Dense runs whose adjacency would exceed ``config.dense_max_bytes`` or that
    raise ``MemoryError`` are recorded as capped entries. Exponents are fitted
    per mode over the uncapped sizes.
    """
    config = config or BenchConfig()
    detections = np.linspace(0.9, 0.6, config.num_detectable)
    records = []
    with _pinned(threads):
        for n in config.sizes:
            rng = substream(config.seed, f"bench/{n}")
            graph = random_graph(n, config.average_degree, config.num_edge_types, config.num_detectable, rng)
            params = _params(graph, config.gsnn, rng)
            det = detections[: len(graph.detectable_ids)]
            for mode in modes:
                need = 8 * config.num_edge_types * n * n
                if mode == "dense" and need > config.dense_max_bytes:
                    records.append(TimingRecord(mode, n, graph.num_edges, 0, np.nan, np.nan, np.nan, True,
                                                f"adjacency needs {need} bytes"))
                    continue
                try:
                    times = time_mode(mode, graph, params, config.gsnn, det, config.trials)
                except MemoryError as exc:
                    records.append(TimingRecord(mode, n, graph.num_edges, 0, np.nan, np.nan, np.nan, True, str(exc)))
                    continue
                rec = TimingRecord(mode, n, graph.num_edges, config.trials, float(np.median(times)),
                                   float(np.mean(times)), float(np.min(times)))
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records, exponents(records)


def exponents(records):
    """Per-mode exponent fitted on the fastest trial at each size.

    The minimum is the least noisy estimate of the cost of a pass: scheduler
    jitter and cache misses only ever add time.
    """
    out = {}
    for mode in dict.fromkeys(r.mode for r in records):
        rows = [r for r in records if r.mode == mode and not r.capped]
        if len(rows) >= 2:
            out[mode] = fit_exponent([r.num_nodes for r in rows], [r.min_seconds for r in rows])
    return out


def format_records(records, exps=None):
    lines = ["mode\tnodes\tedges\ttrials\tmedian_s\tmean_s\tmin_s\tcapped\tnote"]
    for r in records:
        lines.append(f"{r.mode}\t{r.num_nodes}\t{r.num_edges}\t{r.trials}\t{r.median_seconds:.6g}\t"
                     f"{r.mean_seconds:.6g}\t{r.min_seconds:.6g}\t{int(r.capped)}\t{r.note}")
    for mode, e in (exps or {}).items():
        lines.append(f"# exponent\t{mode}\t{e:.4f}")
    return "\n".join(lines) + "\n"
