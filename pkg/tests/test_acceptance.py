"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``. The directional
experiment and the scaling sweep take several minutes.
"""

import itertools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from gsnn.benchmark import BenchConfig, scaling_benchmark
from gsnn.evaluation import average_precision, evaluate, sensitivity
from gsnn.numeric import (
    OptimizerConfig,
    ParameterSet,
    bce_backward,
    bce_loss,
    dropout_backward,
    dropout_forward,
    gru_gate_backward,
    gru_gate_step,
    linear_backward,
    linear_forward,
    mse_backward,
    mse_loss,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
)
from gsnn.pipeline import (
    BaselineModel,
    Example,
    GsnnModel,
    TrainConfig,
    batch_loss_and_grad,
    classify,
    classify_backward,
    train,
)
from gsnn.propagation import (
    EdgeRouting,
    node_importance,
    node_importance_backward,
    node_output,
    node_output_backward,
    propagate_backward,
    propagate_step,
)
from gsnn.search import GsnnConfig, importance_targets, run_dense_ggnn, run_gsnn
from gsnn.synthdata import SceneModel, make_concept_graph, sample_examples

from conftest import bfs_targets, covering_graph, fd_grad, random_graph, random_params, rel_err


@pytest.fixture
def report(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    @contextmanager
    def criterion(number, title):
        info = {}
        start = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            line = (f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} "
                    f"[{time.perf_counter() - start:.1f}s{'; ' + detail if detail else ''}]")
            if reporter is not None:
                reporter.write_line("")
                reporter.write_line(line)
            else:
                print(line)

    return criterion


# ---------------------------------------------------------------------------
# 1. Gradient suite
# ---------------------------------------------------------------------------

def _op_errors(rng):
    """Worst relative error of every differentiable op on fresh random inputs."""
    errs = {}
    x = rng.normal(size=5)
    c = rng.normal(size=5)
    errs["sigmoid"] = rel_err(sigmoid_backward(c, sigmoid(x)), fd_grad(lambda: float(c @ sigmoid(x)), x)).max()
    errs["tanh"] = rel_err(tanh_backward(c, tanh(x)), fd_grad(lambda: float(c @ tanh(x)), x)).max()

    W, b, xin = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    cl = rng.normal(size=3)
    f = lambda: float(cl @ linear_forward(xin, W, b))
    dx, dW, db = linear_backward(cl, xin, W)
    errs["linear"] = max(rel_err(dx, fd_grad(f, xin)).max(), rel_err(dW, fd_grad(f, W)).max(),
                         rel_err(db, fd_grad(f, b)).max())

    H = 3
    gates = [rng.normal(size=(H, H)) for _ in range(6)]
    h, a, cg = rng.normal(size=H), rng.normal(size=H), rng.normal(size=H)
    f = lambda: float(cg @ gru_gate_step(h, a, *gates)[0])
    dh, da, grads = gru_gate_backward(cg, gru_gate_step(h, a, *gates)[1], *gates)
    e = [rel_err(dh, fd_grad(f, h)).max(), rel_err(da, fd_grad(f, a)).max()]
    e += [rel_err(grads[n], fd_grad(f, m)).max() for n, m in zip(("Wz", "Uz", "Wr", "Ur", "Wh", "Uh"), gates)]
    errs["gru"] = max(e)

    p = rng.uniform(0.05, 0.95, size=6)
    t = (rng.random(6) < 0.5).astype(float)
    errs["bce"] = rel_err(bce_backward(p, t), fd_grad(lambda: bce_loss(p, t), p)).max()
    q = rng.random(6)
    errs["mse"] = rel_err(mse_backward(p, q), fd_grad(lambda: mse_loss(p, q), p)).max()

    xd = rng.normal(size=8)
    _, mask = dropout_forward(xd, 0.5, "train", rng)
    cd = rng.normal(size=8)
    errs["dropout"] = rel_err(dropout_backward(cd, mask), fd_grad(lambda: float(cd @ (xd * mask)), xd)).max()
    return errs


def _graph_op_errors(rng):
    g = random_graph(rng, int(rng.integers(3, 11)), int(rng.integers(3, 20)), n_detectable=2)
    params = random_params(rng, g, hidden=3, out=2, scale=0.7)
    src = [e.src for e in g.edges]
    dst = [e.dst for e in g.edges]
    et = [e.edge_type for e in g.edges]
    routing = EdgeRouting.from_edges(src, dst, et, len(g.edge_types))
    n = g.num_nodes
    Hs = rng.normal(size=(n, 3))
    X = rng.random((n, 1))
    nb = rng.normal(size=n)
    errs = {}

    C = rng.normal(size=(n, 3))
    params.zero_grad()
    _, cache = propagate_step(Hs, routing, params)
    dH = propagate_backward(C, cache, params)
    f = lambda: float((C * propagate_step(Hs, routing, params)[0]).sum())
    e = [rel_err(dH, fd_grad(f, Hs)).max()]
    e += [rel_err(params.grads[k], fd_grad(f, params.values[k])).max() for k in params if k.startswith("prop.")]
    errs["propagate_step"] = max(e)

    Co = rng.normal(size=(n, 2))
    params.zero_grad()
    out, inp = node_output(Hs, X, nb, params)
    dHo, dXo, dnb = node_output_backward(Co, out, inp, params)
    f = lambda: float((Co * node_output(Hs, X, nb, params)[0]).sum())
    e = [rel_err(dHo, fd_grad(f, Hs)).max(), rel_err(dXo, fd_grad(f, X)).max(), rel_err(dnb, fd_grad(f, nb)).max()]
    e += [rel_err(params.grads[k], fd_grad(f, params.values[k])).max() for k in ("out.weight", "out.bias")]
    errs["node_output"] = max(e)

    Ci = rng.normal(size=n)
    params.zero_grad()
    s, inp = node_importance(Hs, X, params)
    dHi, dXi = node_importance_backward(Ci, s, inp, params)
    f = lambda: float(Ci @ node_importance(Hs, X, params)[0])
    e = [rel_err(dHi, fd_grad(f, Hs)).max(), rel_err(dXi, fd_grad(f, X)).max()]
    e += [rel_err(params.grads[k], fd_grad(f, params.values[k])).max() for k in ("imp.weight", "imp.bias")]
    errs["node_importance"] = max(e)

    cp = ParameterSet()
    cp.add("cls.weight", rng.normal(size=(3, 5)))
    cp.add("cls.bias", rng.normal(size=(1, 3)))
    feats = rng.normal(size=(2, 5))
    Cc = rng.normal(size=(2, 3))
    probs, mask = classify(feats, cp)
    dfeat = classify_backward(Cc, probs, feats, mask, cp)
    f = lambda: float((Cc * classify(feats, cp)[0]).sum())
    e = [rel_err(dfeat, fd_grad(f, feats)).max()]
    e += [rel_err(cp.grads[k], fd_grad(f, cp.values[k])).max() for k in cp]
    errs["classifier"] = max(e)
    return errs


def _pipeline_error(rng):
    """Full unrolled pipeline (search, outputs, classifier, BCE plus
    importance loss) on a graph of at most 10 nodes with T=2."""
    n = int(rng.integers(4, 11))
    g = random_graph(rng, n, int(rng.integers(n, 2 * n + 1)), n_detectable=2)
    model = GsnnModel(g, GsnnConfig(hidden_dim=2, out_dim=1, steps=2, expand_per_step=2), image_dim=2,
                      seed=int(rng.integers(1 << 30)))
    for k in model.params:
        model.params.values[k][:] = rng.normal(scale=0.7, size=model.params.values[k].shape)
    batch = [Example(rng.random(2), rng.normal(size=2), (rng.random(n) < 0.4).astype(float)) for _ in range(2)]
    traces = [model.forward(ex).gsnn.subgraph.trace() for ex in batch]
    batch_loss_and_grad(model, batch, mode="eval", traces=traces)
    analytic = {k: model.params.grads[k].copy() for k in model.params}
    f = lambda: batch_loss_and_grad(model, batch, mode="eval", traces=traces)[0]
    return max(rel_err(analytic[k], fd_grad(f, model.params.values[k])).max() for k in model.params)


def test_criterion_1_gradient_suite(report):
    with report(1, "every op and the unrolled pipeline match central differences (<= 1e-4, 100 trials)") as info:
        rng = np.random.default_rng(101)
        worst = {}
        start = time.perf_counter()
        for _ in range(100):
            for name, e in {**_op_errors(rng), **_graph_op_errors(rng), "pipeline": _pipeline_error(rng)}.items():
                worst[name] = max(worst.get(name, 0.0), float(e))
        elapsed = time.perf_counter() - start
        info["worst"] = f"{max(worst.values()):.2e} ({max(worst, key=worst.get)})"
        info["seconds"] = f"{elapsed:.1f}"
        assert max(worst.values()) <= 1e-4, worst
        assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. Dense oracle
# ---------------------------------------------------------------------------

def test_criterion_2_dense_oracle(report):
    with report(2, "search network equals dense full-graph propagation when every node is active (<= 1e-10)") as info:
        rng = np.random.default_rng(202)
        worst = 0.0
        for _ in range(20):
            g = covering_graph(rng, int(rng.integers(1, 13)))
            params = random_params(rng, g)
            det = np.array([0.95, rng.random()])[: len(g.detectable_ids)]
            cfg = GsnnConfig(hidden_dim=4, out_dim=3, steps=int(rng.integers(1, 5)))
            res = run_gsnn(g, det, params, cfg)
            assert sorted(res.nodes) == list(range(g.num_nodes))
            dense = run_dense_ggnn(g, det, params, cfg)
            worst = max(worst, float(np.abs(res.outputs - dense[res.nodes]).max()))
        info["max_abs_diff"] = f"{worst:.1e}"
        assert worst <= 1e-10


# ---------------------------------------------------------------------------
# 3. Importance targets
# ---------------------------------------------------------------------------

def test_criterion_3_importance_targets(report):
    with report(3, "importance targets equal a breadth-first-search brute force (gamma=0.3)") as info:
        rng = np.random.default_rng(303)
        levels = set()
        for _ in range(50):
            n = int(rng.integers(1, 31))
            g = random_graph(rng, n, int(rng.integers(0, 2 * n + 1)))
            labels = set(rng.choice(n, size=int(rng.integers(1, min(n, 4) + 1)), replace=False).tolist())
            got = importance_targets(g, labels, 0.3, 3)
            want = bfs_targets(g, labels, 0.3, 3)
            np.testing.assert_array_equal(got, want)
            levels |= set(np.round(got, 12).tolist())
        assert {1.0, 0.3, 0.09} <= levels
        info["graphs"] = 50


# ---------------------------------------------------------------------------
# 4. Budget bound
# ---------------------------------------------------------------------------

def test_criterion_4_budget_bound(report):
    with report(4, "|expanded| <= |detected| + P(T-1) over 1000 runs") as info:
        rng = np.random.default_rng(404)
        graphs = [random_graph(rng, int(rng.integers(5, 60)), int(rng.integers(5, 200)),
                               n_detectable=int(rng.integers(1, 5))) for _ in range(20)]
        violations = 0
        for run in range(1000):
            g = graphs[run % len(graphs)]
            cfg = GsnnConfig(hidden_dim=3, out_dim=2, steps=int(rng.integers(1, 5)),
                             expand_per_step=int(rng.integers(1, 6)),
                             detection_threshold=float(rng.choice([0.0, 0.5, 0.9])))
            params = random_params(rng, g, hidden=3, out=2)
            sub = run_gsnn(g, rng.random(len(g.detectable_ids)), params, cfg).subgraph
            if len(sub.expanded) > len(sub.detected) + cfg.expand_per_step * (cfg.steps - 1):
                violations += 1
        info["violations"] = violations
        assert violations == 0


# ---------------------------------------------------------------------------
# 5. Scaling
# ---------------------------------------------------------------------------

def test_criterion_5_scaling(report):
    with report(5, "dense time exponent >= 1.7 and search exponent <= 0.3 over N in {500..5000}") as info:
        start = time.perf_counter()
        records, exps = scaling_benchmark(BenchConfig(sizes=(500, 1000, 2000, 5000), trials=20), threads=1)
        info["dense"] = f"{exps.get('dense', float('nan')):.3f}"
        info["gsnn"] = f"{exps.get('gsnn', float('nan')):.3f}"
        assert not any(r.capped for r in records)
        assert exps["dense"] >= 1.7
        assert exps["gsnn"] <= 0.3
        assert time.perf_counter() - start < 600


# ---------------------------------------------------------------------------
# 6. Directional experiment
# ---------------------------------------------------------------------------

def test_criterion_6_directional(report):
    with report(6, "test mAP ordering gsnn > feature+det > feature, gsnn ahead by >= 2 points") as info:
        start = time.perf_counter()
        graph = make_concept_graph()
        assert (graph.num_nodes, len(graph.detectable_ids)) == (316, 80)
        scenes = SceneModel(graph)
        train_set = sample_examples(scenes, 5000, seed=0, split="train")
        test_set = sample_examples(scenes, 1000, seed=0, split="test")
        cfg = TrainConfig(epochs=20, batch_size=16,
                          graph_optimizer=OptimizerConfig(kind="adam", learning_rate=0.05),
                          classifier_optimizer=OptimizerConfig(learning_rate=10.0))
        D = scenes.feature_dim
        maps = {}
        for kind in ("feature", "feature+det"):
            model = BaselineModel(kind, 316, D, 80, seed=0)
            train(model, train_set, cfg, seed=0)
            maps[kind] = evaluate(model, test_set).mAP
        model = GsnnModel(graph, GsnnConfig(), image_dim=D, seed=0)
        train(model, train_set, cfg, seed=0)
        maps["gsnn"] = evaluate(model, test_set).mAP
        info.update({k: f"{v:.4f}" for k, v in maps.items()})
        assert maps["gsnn"] > maps["feature+det"] > maps["feature"]
        assert maps["gsnn"] - maps["feature+det"] >= 0.02
        assert time.perf_counter() - start < 1800


# ---------------------------------------------------------------------------
# 7. mAP oracle
# ---------------------------------------------------------------------------

def _enumerated_ap(order, labels):
    """AP of one explicit ranking: mean over positives of hits-so-far / rank."""
    precisions = []
    for rank in range(1, len(order) + 1):
        if labels[order[rank - 1]]:
            hits = sum(labels[i] for i in order[:rank])
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def test_criterion_7_map_oracle(report):
    with report(7, "average precision equals enumeration over every ranking of <= 6 items") as info:
        start = time.perf_counter()
        checked = 0
        for n in range(1, 7):
            label_sets = [ls for ls in itertools.product((0, 1), repeat=n) if any(ls)]
            for order in itertools.permutations(range(n)):
                scores = np.empty(n)
                scores[list(order)] = np.arange(n, 0, -1)
                for labels in label_sets:
                    got = average_precision(scores, labels)
                    assert abs(got - _enumerated_ap(order, labels)) <= 1e-12
                    checked += 1
        elapsed = time.perf_counter() - start
        info["rankings"] = checked
        info["seconds"] = f"{elapsed:.2f}"
        # the enumeration itself dominates; time the metric alone for the runtime bound
        t0 = time.perf_counter()
        for order in itertools.permutations(range(6)):
            average_precision(np.array(order, float), [1, 0, 1, 0, 0, 1])
        assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 8. Sensitivity
# ---------------------------------------------------------------------------

def _sensitivity_case(rng):
    n = int(rng.integers(5, 11))
    g = random_graph(rng, n, int(rng.integers(n, 2 * n + 1)), n_detectable=3)
    model = GsnnModel(g, GsnnConfig(hidden_dim=3, out_dim=2, steps=3, expand_per_step=2), image_dim=3,
                      seed=int(rng.integers(1 << 30)))
    for k in model.params:
        model.params.values[k][:] = rng.normal(scale=0.6, size=model.params.values[k].shape)
    ex = Example(rng.random(3), rng.normal(size=3), (rng.random(n) < 0.4).astype(float))
    label = int(rng.integers(n))
    table = sensitivity(model, ex, label)
    base = model.forward(ex).gsnn
    tr = base.subgraph.trace()
    cfg = model.config

    def prob(hook=None, det=None):
        d = ex.detections if det is None else det
        res = run_gsnn(g, d, model.params, cfg, tr, hook)
        out = np.zeros((n, cfg.out_dim))
        out[res.nodes] = res.outputs
        return float(classify(np.concatenate([out.ravel(), ex.image_feature, d]), model.params)[0][0, label])

    worst, zero_ok = 0.0, True
    h = 1e-6
    for t in range(cfg.steps + 1):
        present = set(base.nodes[: (base.rows[t] if t < cfg.steps else len(base.nodes))])
        for v in range(n):
            if v not in present:
                zero_ok &= table.hidden[t, v] == 0.0
                continue
            grad = np.zeros(cfg.hidden_dim)
            for k in range(cfg.hidden_dim):
                vals = []
                for eps in (h, -h):
                    def hook(step, sub, eps=eps):
                        if step == t:
                            sub.hidden[sub.local[v], k] += eps
                    vals.append(prob(hook))
                grad[k] = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, float(rel_err(table.hidden[t, v], np.linalg.norm(grad), floor=1e-8)))
    for i in range(3):
        d = ex.detections.copy()
        d[i] += h
        up = prob(det=d)
        d[i] -= 2 * h
        worst = max(worst, float(rel_err(table.detections[i], (up - prob(det=d)) / (2 * h), floor=1e-8)))
    return worst, zero_ok


def test_criterion_8_sensitivity(report):
    with report(8, "sensitivity derivatives match finite differences, inactive nodes exactly zero") as info:
        rng = np.random.default_rng(808)
        worst, zeros = 0.0, True
        for _ in range(10):
            w, z = _sensitivity_case(rng)
            worst, zeros = max(worst, w), zeros and z
        info["worst"] = f"{worst:.2e}"
        assert zeros
        assert worst <= 1e-4


# ---------------------------------------------------------------------------
# 9. Determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism(report, tmp_path):
    from gsnn.cli import main
    with report(9, "train twice with one seed gives byte-identical checkpoints (--threads 1)") as info:
        assert main(["build-graph", "--synthetic", "--out", str(tmp_path / "g.txt")]) == 0
        assert main(["gen-data", "--graph", str(tmp_path / "g.txt"), "--n-train", "64", "--n-test", "8",
                     "--seed", "7", "--out", str(tmp_path / "data")]) == 0
        outs = []
        for name in ("a.ckpt", "b.ckpt"):
            assert main(["train", "--graph", str(tmp_path / "g.txt"), "--data", str(tmp_path / "data" / "train.txt"),
                         "--epochs", "2", "--seed", "11", "--threads", "1", "--out", str(tmp_path / name)]) == 0
            outs.append((tmp_path / name).read_bytes())
        info["bytes"] = len(outs[0])
        assert outs[0] == outs[1]
