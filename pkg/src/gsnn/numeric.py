"""Dense layer primitives with analytic gradients, losses and optimizers.

Every forward function here has a matching ``*_backward`` that returns exact
gradients. Arrays are float64 numpy arrays; "vectors" may also be passed as
2-D row batches, in which case each row is an independent instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NumericError, ParseError, StateError, VersionError

BCE_EPS = 1e-7

CHECKPOINT_MAGIC = "GSNN-CKPT"
CHECKPOINT_VERSION = 1


def check_finite(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericError(stage)
    return x


def _shape_error(what, a, b):
    return DimensionError(f"{what}: shapes {tuple(np.shape(a))} and {tuple(np.shape(b))} do not conform")


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # Split on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    """Gradient through ``y = sigmoid(x)`` given the forward output ``y``."""
    return dy * y * (1.0 - y)


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


# ---------------------------------------------------------------------------
# Linear layer
# ---------------------------------------------------------------------------

def linear_forward(x, W, b):
    """``y = W x + b``. ``x`` may be a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise _shape_error("linear_forward x vs W", x, W)
    if b.shape[0] != W.shape[0]:
        raise _shape_error("linear_forward W vs b", W, b)
    return x @ W.T + b


def linear_backward(dy, x, W):
    """Return ``(dx, dW, db)`` for ``y = W x + b``."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if dy.shape[-1] != W.shape[0]:
        raise _shape_error("linear_backward dy vs W", dy, W)
    dx = dy @ W
    if x.ndim == 1:
        dW = np.outer(dy, x)
        db = dy.copy()
    else:
        dW = dy.T @ x
        db = dy.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------------------
# Gated recurrent update
# ---------------------------------------------------------------------------

GRU_PARAM_NAMES = ("Wz", "Uz", "Wr", "Ur", "Wh", "Uh")


@dataclass
class GruCache:
    h_prev: np.ndarray
    a: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray


def gru_gate_step(h_prev, a, Wz, Uz, Wr, Ur, Wh, Uh):
    """One gated update.

    z = sigmoid(Wz a + Uz h), r = sigmoid(Wr a + Ur h),
    h~ = tanh(Wh a + Uh (r * h)), h' = (1 - z) * h + z * h~.

    Returns ``(h_next, cache)``. Works on single vectors or row batches.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if h_prev.shape != a.shape or h_prev.shape[-1] != Uz.shape[1]:
        raise _shape_error("gru_gate_step h_prev vs a", h_prev, a)
    z = check_finite(sigmoid(a @ Wz.T + h_prev @ Uz.T), "update_gate")
    r = check_finite(sigmoid(a @ Wr.T + h_prev @ Ur.T), "reset_gate")
    h_tilde = check_finite(np.tanh(a @ Wh.T + (r * h_prev) @ Uh.T), "candidate")
    h_next = check_finite((1.0 - z) * h_prev + z * h_tilde, "hidden")
    return h_next, GruCache(h_prev, a, z, r, h_tilde)


def gru_gate_backward(dh_next, cache, Wz, Uz, Wr, Ur, Wh, Uh):
    """Backward of :func:`gru_gate_step`.

    Returns ``(dh_prev, da, grads)`` with ``grads`` keyed by
    :data:`GRU_PARAM_NAMES`.
    """
    h, a, z, r, ht = cache.h_prev, cache.a, cache.z, cache.r, cache.h_tilde
    batched = h.ndim == 2
    outer = (lambda u, v: u.T @ v) if batched else np.outer

    dz = dh_next * (ht - h)
    dht = dh_next * z
    dh = dh_next * (1.0 - z)

    dpre_h = dht * (1.0 - ht * ht)
    rh = r * h
    drh = dpre_h @ Uh
    dr = drh * h
    dh += drh * r
    dpre_r = dr * r * (1.0 - r)
    dpre_z = dz * z * (1.0 - z)

    da = dpre_h @ Wh + dpre_r @ Wr + dpre_z @ Wz
    dh += dpre_r @ Ur + dpre_z @ Uz
    grads = {
        "Wz": outer(dpre_z, a),
        "Uz": outer(dpre_z, h),
        "Wr": outer(dpre_r, a),
        "Ur": outer(dpre_r, h),
        "Wh": outer(dpre_h, a),
        "Uh": outer(dpre_h, rh),
    }
    return dh, da, grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_loss(predictions, targets):
    """Mean binary cross entropy; predictions are clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise _shape_error("bce_loss", p, t)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DomainError("bce_loss targets must be 0 or 1")
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    return float(check_finite(loss, "bce_loss"))


def bce_backward(predictions, targets):
    """Gradient of :func:`bce_loss` w.r.t. predictions, evaluated at the clamped value."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(targets, dtype=np.float64)
    return (p - t) / (p * (1.0 - p)) / p.size


def mse_loss(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise _shape_error("mse_loss", p, t)
    return float(np.mean((p - t) ** 2))


def mse_backward(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return 2.0 * (p - t) / p.size


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, mode, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` already carries the
    1/(1-rate) scale so that backward is ``dy * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy * mask


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_uniform(rng, rows, cols, fan_in=None):
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in defaults to ``cols``."""
    bound = 1.0 / math.sqrt(fan_in if fan_in is not None else cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


class ParameterSet:
    """Named 2-D float64 tensors with parallel gradient and optimizer-state slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray | None] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name, value):
        if name in self.values:
            raise StateError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.values[name] = value
        self.grads[name] = None
        self.state[name] = {}
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(sorted(self.values))

    def __len__(self):
        return len(self.values)

    def names(self, prefix=""):
        return [n for n in sorted(self.values) if n.startswith(prefix)]

    def zero_grad(self, names=None):
        for n in names if names is not None else self.values:
            g = self.grads[n]
            if g is None:
                self.grads[n] = np.zeros_like(self.values[n])
            else:
                g.fill(0.0)

    def accumulate(self, name, grad):
        g = self.grads[name]
        if g is None:
            g = self.grads[name] = np.zeros_like(self.values[name])
        g += np.reshape(grad, g.shape)

    def num_scalars(self):
        return sum(v.size for v in self.values.values())

    def copy(self):
        out = ParameterSet()
        for n in self.values:
            out.values[n] = self.values[n].copy()
            out.grads[n] = None if self.grads[n] is None else self.grads[n].copy()
            out.state[n] = {k: v.copy() for k, v in self.state[n].items()}
        return out

    def flat(self, names=None):
        names = names if names is not None else list(self)
        return np.concatenate([self.values[n].ravel() for n in names])

    def flat_grad(self, names=None):
        names = names if names is not None else list(self)
        return np.concatenate([self.grads[n].ravel() for n in names])


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"
    learning_rate: float = 0.05
    momentum: float = 0.5
    l2_penalty: float = 1e-6
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be >= 0")

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)


def optimizer_step(params, config, epoch, names=None):
    """Apply one update to ``names`` (default: all parameters) in place."""
    names = list(params) if names is None else list(names)
    lr = config.lr_at(epoch)
    lam = config.l2_penalty
    for n in names:
        g = params.grads.get(n)
        if g is None:
            raise StateError(f"no gradient for parameter {n!r}")
        w = params.values[n]
        st = params.state[n]
        if config.kind == "sgd_momentum":
            v = st.get("velocity")
            if v is None:
                v = st["velocity"] = np.zeros_like(w)
            v *= config.momentum
            v += g
            if lam:
                v += lam * w
            w -= lr * v
        else:
            gg = g + lam * w if lam else g
            m = st.get("adam_m")
            if m is None:
                m = st["adam_m"] = np.zeros_like(w)
                st["adam_v"] = np.zeros_like(w)
                st["adam_step"] = np.zeros((1, 1))
            v = st["adam_v"]
            st["adam_step"] += 1.0
            k = st["adam_step"][0, 0]
            m *= config.beta1
            m += (1.0 - config.beta1) * gg
            v *= config.beta2
            v += (1.0 - config.beta2) * gg * gg
            mhat = m / (1.0 - config.beta1 ** k)
            vhat = v / (1.0 - config.beta2 ** k)
            w -= lr * mhat / (np.sqrt(vhat) + config.epsilon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, path, include_state=False):
    """Write parameters (sorted by name) as little-endian float64 blocks."""
    chunks = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n".encode()]
    for n in params:
        v = params.values[n]
        chunks.append(f"P\t{n}\t{v.shape[0]}\t{v.shape[1]}\n".encode())
        chunks.append(v.astype("<f8").tobytes())
    if include_state:
        chunks.append(b"STATE\n")
        for n in params:
            for slot in sorted(params.state[n]):
                v = params.state[n][slot]
                chunks.append(f"S\t{n}\t{slot}\t{v.shape[0]}\t{v.shape[1]}\n".encode())
                chunks.append(v.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    pos = 0
    lineno = 0

    def read_line():
        nonlocal pos, lineno
        end = data.find(b"\n", pos)
        if end < 0:
            raise ParseError("truncated checkpoint", line=lineno + 1, path=path)
        line = data[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        lineno += 1
        return line

    def read_block(rows, cols):
        nonlocal pos
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ParseError("truncated tensor data", line=lineno, path=path)
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += nbytes
        return arr.astype(np.float64)

    header = read_line().split(" ")
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", line=1, path=path)
    if header[1] != f"v{CHECKPOINT_VERSION}":
        raise VersionError(f"unsupported checkpoint version {header[1]}", line=1, path=path)
    params = ParameterSet()
    while pos < len(data):
        fields = read_line().split("\t")
        try:
            if fields[0] == "P" and len(fields) == 4:
                params.add(fields[1], read_block(int(fields[2]), int(fields[3])))
            elif fields[0] == "STATE" and len(fields) == 1:
                continue
            elif fields[0] == "S" and len(fields) == 5:
                if fields[1] not in params:
                    raise ParseError(f"state for unknown parameter {fields[1]!r}", line=lineno, path=path)
                params.state[fields[1]][fields[2]] = read_block(int(fields[3]), int(fields[4]))
            else:
                raise ParseError(f"unrecognized record {fields[0]!r}", line=lineno, path=path)
        except (ValueError, StateError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line=lineno, path=path) from exc
    return params
