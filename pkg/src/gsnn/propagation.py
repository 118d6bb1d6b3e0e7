"""Gated graph propagation over a set of nodes with typed, directed edges.

All functions work on a *local* node set: row ``i`` of a hidden-state matrix
belongs to whatever global node the caller mapped to ``i``; edges are given
as local ``(src, dst, edge_type)`` index arrays. Every forward returns a
cache, and the matching backward accumulates parameter gradients into the
:class:`~gsnn.numeric.ParameterSet` and returns input gradients.

Parameter names::

    prop.msg_in, prop.msg_out   (E*H, H)  per-edge-type message matrices, stacked
    prop.msg_bias               (1, H)    shared message bias
    prop.Wz ... prop.Uh         (H, H)    gate matrices
    out.weight, out.bias        (O, H+X+1), (1, O)
    imp.weight, imp.bias        (1, H+X), (1, 1)
    node_bias                   (1, N)    one scalar per graph node
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numeric import (
    GRU_PARAM_NAMES,
    GruCache,
    gru_gate_backward,
    gru_gate_step,
    init_uniform,
    sigmoid,
)

GATE_PARAMS = tuple("prop." + n for n in GRU_PARAM_NAMES)
PROPAGATION_PREFIXES = ("prop.", "out.", "imp.", "node_bias")


@dataclass(frozen=True)
class ModelDims:
    hidden_dim: int = 10
    annotation_dim: int = 1
    out_dim: int = 5
    num_edge_types: int = 1
    num_nodes: int = 1


def init_propagation_params(params, dims, rng):
    """Add propagation, output, importance and node-bias tensors to ``params``.

    Weight matrices are uniform in +-1/sqrt(fan_in); biases start at zero.
    """
    H, X, O, E = dims.hidden_dim, dims.annotation_dim, dims.out_dim, dims.num_edge_types
    params.add("prop.msg_in", np.concatenate([init_uniform(rng, H, H) for _ in range(E)]) if E else np.zeros((0, H)))
    params.add("prop.msg_out", np.concatenate([init_uniform(rng, H, H) for _ in range(E)]) if E else np.zeros((0, H)))
    params.add("prop.msg_bias", np.zeros((1, H)))
    for name in GATE_PARAMS:
        params.add(name, init_uniform(rng, H, H))
    params.add("out.weight", init_uniform(rng, O, H + X + 1))
    params.add("out.bias", np.zeros((1, O)))
    params.add("imp.weight", init_uniform(rng, 1, H + X))
    params.add("imp.bias", np.zeros((1, 1)))
    params.add("node_bias", np.zeros((1, dims.num_nodes)))
    return params


def dims_of(params):
    H = params["prop.Wz"].shape[0]
    O, width = params["out.weight"].shape
    return ModelDims(hidden_dim=H, annotation_dim=width - H - 1, out_dim=O,
                     num_edge_types=params["prop.msg_in"].shape[0] // H,
                     num_nodes=params["node_bias"].shape[1])


def init_hidden(annotation, hidden_dim):
    """Annotation copied into the leading entries of a zero hidden vector."""
    annotation = np.atleast_1d(np.asarray(annotation, dtype=np.float64))
    if annotation.shape[-1] > hidden_dim:
        raise DimensionError(f"annotation length {annotation.shape[-1]} exceeds hidden_dim {hidden_dim}")
    h = np.zeros(annotation.shape[:-1] + (hidden_dim,))
    h[..., :annotation.shape[-1]] = annotation
    return h


def _message_stack(params):
    """(2E, H, H): in-direction matrices then out-direction matrices."""
    H = params["prop.Wz"].shape[0]
    return np.concatenate([params["prop.msg_in"], params["prop.msg_out"]]).reshape(-1, H, H)


@dataclass
class EdgeRouting:
    """Directed local edges expanded into (receiver, sender, matrix) triples.

    Edge ``u -> v`` of type ``e`` delivers ``W_in[e] h_u`` to ``v`` and
    ``W_out[e] h_v`` to ``u``.
    """

    recv: np.ndarray
    send: np.ndarray
    mat: np.ndarray

    @classmethod
    def from_edges(cls, src, dst, etype, num_edge_types):
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        etype = np.asarray(etype, dtype=np.intp)
        return cls(np.concatenate([dst, src]), np.concatenate([src, dst]),
                   np.concatenate([etype, etype + num_edge_types]))


def aggregate_messages(H, routing, params):
    """``a_v = sum_in W_in[e] h_u + sum_out W_out[e] h_u + b`` for every row.

    Returns ``(a, Y)`` where ``Y[k] = H @ W_k.T`` is kept for the backward.
    """
    Wm = _message_stack(params)
    Y = np.einsum("nd,khd->knh", H, Wm)
    a = np.repeat(params["prop.msg_bias"], H.shape[0], axis=0)
    if routing.recv.size:
        np.add.at(a, routing.recv, Y[routing.mat, routing.send])
    return a


def aggregate_backward(da, H, routing, params):
    """Accumulate message-parameter gradients; return dL/dH via messages."""
    Wm = _message_stack(params)
    K, Hd = Wm.shape[0], Wm.shape[1]
    params.accumulate("prop.msg_bias", da.sum(axis=0))
    dY = np.zeros((K, H.shape[0], Hd))
    if routing.recv.size:
        np.add.at(dY, (routing.mat, routing.send), da[routing.recv])
    dW = np.einsum("knh,nd->khd", dY, H)
    E = K // 2
    params.accumulate("prop.msg_in", dW[:E].reshape(-1, Hd))
    params.accumulate("prop.msg_out", dW[E:].reshape(-1, Hd))
    return np.einsum("knh,khd->nd", dY, Wm)


@dataclass
class StepCache:
    routing: EdgeRouting
    gru: GruCache


def propagate_step(H, routing, params):
    """Synchronous update of every row of ``H``; returns ``(H_next, cache)``."""
    a = aggregate_messages(H, routing, params)
    gates = [params[n] for n in GATE_PARAMS]
    H_next, gcache = gru_gate_step(H, a, *gates)
    return H_next, StepCache(routing, gcache)


def propagate_backward(dH_next, cache, params):
    gates = [params[n] for n in GATE_PARAMS]
    dH, da, grads = gru_gate_backward(dH_next, cache.gru, *gates)
    for short, g in grads.items():
        params.accumulate("prop." + short, g)
    dH += aggregate_backward(da, cache.gru.h_prev, cache.routing, params)
    return dH


def node_output(H, X, node_bias, params):
    """Per-node output ``sigmoid(W [h, x, n_v] + c)``; rows are nodes.

    Returns ``(out, inputs)``; ``inputs`` is needed by the backward.
    """
    H = np.atleast_2d(H)
    X = np.atleast_2d(X)
    nb = np.reshape(node_bias, (-1, 1))
    if not (H.shape[0] == X.shape[0] == nb.shape[0]):
        raise DimensionError(f"node_output: {H.shape[0]} hidden rows, {X.shape[0]} annotations, {nb.shape[0]} biases")
    inp = np.concatenate([H, X, nb], axis=1)
    W = params["out.weight"]
    if inp.shape[1] != W.shape[1]:
        raise DimensionError(f"node_output: input width {inp.shape[1]} vs weight {W.shape}")
    return sigmoid(inp @ W.T + params["out.bias"]), inp


def node_output_backward(dout, out, inp, params):
    """Return ``(dH, dX, dnode_bias)``; weight gradients go into ``params``."""
    dpre = dout * out * (1.0 - out)
    params.accumulate("out.weight", dpre.T @ inp)
    params.accumulate("out.bias", dpre.sum(axis=0))
    dinp = dpre @ params["out.weight"]
    Hd = params["prop.Wz"].shape[0]
    return dinp[:, :Hd], dinp[:, Hd:-1], dinp[:, -1]


def node_importance(H, X, params):
    """Importance score in (0, 1) per row; returns ``(scores, inputs)``."""
    inp = np.concatenate([np.atleast_2d(H), np.atleast_2d(X)], axis=1)
    W = params["imp.weight"]
    if inp.shape[1] != W.shape[1]:
        raise DimensionError(f"node_importance: input width {inp.shape[1]} vs weight {W.shape}")
    return sigmoid(inp @ W.T + params["imp.bias"])[:, 0], inp


def node_importance_backward(dscores, scores, inp, params):
    """Return ``(dH, dX)``; weight gradients go into ``params``."""
    dpre = (dscores * scores * (1.0 - scores))[:, None]
    params.accumulate("imp.weight", dpre.T @ inp)
    params.accumulate("imp.bias", dpre.sum(axis=0))
    dinp = dpre @ params["imp.weight"]
    Hd = params["prop.Wz"].shape[0]
    return dinp[:, :Hd], dinp[:, Hd:]
