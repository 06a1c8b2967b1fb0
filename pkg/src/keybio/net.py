"""Two-layer masked LSTM embedding network with hand-derived gradients.

Layout: masking -> LSTM(u) -> batch norm -> dropout -> LSTM(u) -> last
valid hidden state. Gate order in the stacked weights is input, forget,
cell, output. Masked timesteps are skipped: hidden and cell state carry
through unchanged.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .data import NUM_FEATURES, FeatureSequence, stack_batch
from .seeding import derive_rng


@dataclass
class ModelConfig:
    input_dim: int = NUM_FEATURES
    units: int = 128
    num_layers: int = 2
    max_len: int = 50
    dropout: float = 0.5
    recurrent_dropout: float = 0.2
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def validate(self) -> None:
        if self.units < 1:
            raise ValueError("units must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_layers != 2:
            raise ValueError("only the 2-layer architecture is supported")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        for name in ("dropout", "recurrent_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in [0, 1)")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be > 0")


@dataclass
class LstmLayerParams:
    W: np.ndarray  # 4u x d
    U: np.ndarray  # 4u x u
    b: np.ndarray  # 4u


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    updates: int = 0


@dataclass
class DenseParams:
    W: np.ndarray  # C x u
    b: np.ndarray  # C


@dataclass
class ModelParams:
    config: ModelConfig
    layer1: LstmLayerParams
    bn: BatchNormParams
    layer2: LstmLayerParams
    classifier: DenseParams | None = None

    def trainable(self, include_head: bool = True) -> dict[str, np.ndarray]:
        """Name -> array views of every trainable parameter (updates write through)."""
        out = {
            "layer1.W": self.layer1.W,
            "layer1.U": self.layer1.U,
            "layer1.b": self.layer1.b,
            "bn.gamma": self.bn.gamma,
            "bn.beta": self.bn.beta,
            "layer2.W": self.layer2.W,
            "layer2.U": self.layer2.U,
            "layer2.b": self.layer2.b,
        }
        if include_head and self.classifier is not None:
            out["head.W"] = self.classifier.W
            out["head.b"] = self.classifier.b
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def without_head(self) -> "ModelParams":
        out = self.copy()
        out.classifier = None
        return out

    def all_finite(self) -> bool:
        arrays = list(self.trainable().values()) + [self.bn.running_mean, self.bn.running_var]
        return all(np.isfinite(a).all() for a in arrays)


def count_params(config: ModelConfig, num_classes: int = 0) -> int:
    """Trainable parameters; the classifier head only counts when ``num_classes`` > 0."""
    config.validate()
    u, d = config.units, config.input_dim
    n = 4 * u * (d + u + 1) + 2 * u + 4 * u * (2 * u + 1)
    if num_classes:
        n += num_classes * u + num_classes
    return n


def _glorot(rng: np.random.Generator, shape: tuple[int, int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _init_lstm(rng: np.random.Generator, d: int, u: int) -> LstmLayerParams:
    W = _glorot(rng, (4 * u, d), fan_in=d, fan_out=4 * u)
    U = _orthogonal(rng, 4 * u, u)
    b = np.zeros(4 * u)
    b[u : 2 * u] = 1.0
    return LstmLayerParams(W, U, b)


def init_params(config: ModelConfig, seed: int, num_classes: int = 0) -> ModelParams:
    """Glorot-uniform input weights, orthogonal recurrent weights, forget bias 1."""
    config.validate()
    rng = derive_rng(seed, "init")
    u = config.units
    layer1 = _init_lstm(rng, config.input_dim, u)
    layer2 = _init_lstm(rng, u, u)
    bn = BatchNormParams(np.ones(u), np.zeros(u), np.zeros(u), np.ones(u))
    params = ModelParams(config, layer1, bn, layer2)
    if num_classes:
        params.classifier = init_head(u, num_classes, derive_rng(seed, "init.head"))
    return params


def init_head(units: int, num_classes: int, rng: np.random.Generator) -> DenseParams:
    return DenseParams(_glorot(rng, (num_classes, units), units, num_classes), np.zeros(num_classes))


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class _LayerCache:
    x: np.ndarray  # T x B x d, layer input
    h_prev: np.ndarray  # T x B x u, carried state before each step
    c_prev: np.ndarray
    gates: np.ndarray  # T x B x 4u, post-activation
    tanh_c: np.ndarray  # T x B x u
    rec_mask: np.ndarray | None  # B x u


@dataclass
class ForwardCache:
    mode: str
    steps: int  # timesteps actually processed
    max_len: int
    mask: np.ndarray  # T x B
    layer1: _LayerCache
    layer2: _LayerCache
    xhat: np.ndarray | None = None  # T x B x u
    inv_std: np.ndarray | None = None
    count: int = 0
    drop_mask: np.ndarray | None = None  # T x B x u
    shapes: dict = field(default_factory=dict)


def _lstm_forward(p: LstmLayerParams, x: np.ndarray, mask: np.ndarray, rec_mask):
    T, B, _ = x.shape
    u = p.U.shape[1]
    h = np.zeros((B, u))
    c = np.zeros((B, u))
    hs = np.empty((T, B, u))
    h_prev = np.empty((T, B, u))
    c_prev = np.empty((T, B, u))
    gates = np.empty((T, B, 4 * u))
    tanh_c = np.empty((T, B, u))
    WT, UT = p.W.T, p.U.T
    for t in range(T):
        h_prev[t] = h
        c_prev[t] = c
        hr = h if rec_mask is None else h * rec_mask
        z = x[t] @ WT + hr @ UT + p.b
        g = gates[t]
        g[:, : 2 * u] = expit(z[:, : 2 * u])
        g[:, 2 * u : 3 * u] = np.tanh(z[:, 2 * u : 3 * u])
        g[:, 3 * u :] = expit(z[:, 3 * u :])
        c_new = g[:, u : 2 * u] * c + g[:, : u] * g[:, 2 * u : 3 * u]
        tc = np.tanh(c_new)
        tanh_c[t] = tc
        h_new = g[:, 3 * u :] * tc
        m = mask[t][:, None]
        c = np.where(m, c_new, c)
        h = np.where(m, h_new, h)
        hs[t] = h
    return hs, h, _LayerCache(x, h_prev, c_prev, gates, tanh_c, rec_mask)


def _lstm_backward(p: LstmLayerParams, cache: _LayerCache, mask, dh_out, dh_final):
    """BPTT through one layer.

    ``dh_out`` (T x B x u or None) is the gradient w.r.t. each step's output,
    ``dh_final`` w.r.t. the final carried state.
    """
    T, B, _ = cache.x.shape
    u = p.U.shape[1]
    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = np.zeros_like(p.b)
    dx = np.zeros_like(cache.x)
    dh = dh_final.copy() if dh_final is not None else np.zeros((B, u))
    dc = np.zeros((B, u))
    r = cache.rec_mask
    for t in range(T - 1, -1, -1):
        if dh_out is not None:
            dh = dh + dh_out[t]
        g = cache.gates[t]
        gi, gf, gg, go = g[:, :u], g[:, u : 2 * u], g[:, 2 * u : 3 * u], g[:, 3 * u :]
        tc = cache.tanh_c[t]
        dcc = dc + dh * go * (1.0 - tc * tc)
        dz = np.empty((B, 4 * u))
        dz[:, :u] = dcc * gg * gi * (1.0 - gi)
        dz[:, u : 2 * u] = dcc * cache.c_prev[t] * gf * (1.0 - gf)
        dz[:, 2 * u : 3 * u] = dcc * gi * (1.0 - gg * gg)
        dz[:, 3 * u :] = dh * tc * go * (1.0 - go)
        m = mask[t][:, None]
        dz *= m
        hr = cache.h_prev[t] if r is None else cache.h_prev[t] * r
        dW += dz.T @ cache.x[t]
        dU += dz.T @ hr
        db += dz.sum(axis=0)
        dx[t] = dz @ p.W
        dh_prev = dz @ p.U
        if r is not None:
            dh_prev *= r
        dh = np.where(m, dh_prev, dh)
        dc = np.where(m, dcc * gf, dc)
    return LstmLayerParams(dW, dU, db), dx


def _check_inputs(params: ModelParams, x: np.ndarray, mask: np.ndarray) -> None:
    cfg = params.config
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ValueError(f"inputs must be B x M x {cfg.input_dim}, got {x.shape}")
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match inputs {x.shape[:2]}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid timestep")


def forward(
    params: ModelParams,
    x: np.ndarray,
    mask: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    update_stats: bool = True,
):
    """Embeddings (B x u) and a cache for :func:`backward`.

    Train mode draws dropout masks from ``rng`` (recurrent masks fixed per
    sequence and layer), normalizes with batch statistics over valid steps
    and updates the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_inputs(params, x, mask)
    cfg = params.config
    B, M, _ = x.shape
    u = cfg.units
    valid_cols = np.flatnonzero(mask.any(axis=0))
    T = int(valid_cols[-1]) + 1
    xt = np.ascontiguousarray(x[:, :T].transpose(1, 0, 2))
    mt = np.ascontiguousarray(mask[:, :T].T)

    train = mode == "train"
    if train and rng is None and (cfg.dropout > 0 or cfg.recurrent_dropout > 0):
        raise ValueError("train mode with dropout needs an rng")

    def rec_mask():
        if not train or cfg.recurrent_dropout == 0:
            return None
        keep = 1.0 - cfg.recurrent_dropout
        return (rng.random((B, u)) < keep) / keep

    h1, _, c1 = _lstm_forward(params.layer1, xt, mt, rec_mask())

    bn = params.bn
    cache = ForwardCache(mode, T, M, mt, c1, None, shapes={"B": B, "M": M})
    V = mt[:, :, None]
    if train:
        n = int(mt.sum())
        mean = (h1 * V).sum(axis=(0, 1)) / n
        centered = (h1 - mean) * V
        var = (centered * centered).sum(axis=(0, 1)) / n
        inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
        xhat = centered * inv_std
        if update_stats:
            mom = cfg.bn_momentum
            bn.running_mean = mom * bn.running_mean + (1 - mom) * mean
            bn.running_var = mom * bn.running_var + (1 - mom) * var
            bn.updates += 1
        cache.xhat, cache.inv_std, cache.count = xhat, inv_std, n
    else:
        xhat = (h1 - bn.running_mean) / np.sqrt(bn.running_var + cfg.bn_epsilon)
    y = (bn.gamma * xhat + bn.beta) * V

    if train and cfg.dropout > 0:
        keep = 1.0 - cfg.dropout
        drop = (rng.random((T, B, u)) < keep) / keep
        y = y * drop
        cache.drop_mask = drop

    _, emb, c2 = _lstm_forward(params.layer2, y, mt, rec_mask())
    cache.layer2 = c2
    return emb, cache


def backward(params: ModelParams, cache: ForwardCache, grad_embeddings: np.ndarray):
    """Gradients of a scalar loss given dLoss/dEmbedding.

    Returns ``(grads, grad_inputs)``: a name -> array dict matching
    :meth:`ModelParams.trainable` (no head) and dLoss/dInputs (B x M x d).
    """
    if cache.mode != "train":
        raise ValueError("backward needs a cache from a train-mode forward")
    B, M = cache.shapes["B"], cache.shapes["M"]
    u = params.config.units
    if grad_embeddings.shape != (B, u):
        raise ValueError(f"grad_embeddings must be {(B, u)}, got {grad_embeddings.shape}")
    if params.layer2.U.shape != (4 * u, u) or cache.layer1.x.shape[2] != params.config.input_dim:
        raise ValueError("cache does not match params")
    mt = cache.mask
    g2, dy = _lstm_backward(params.layer2, cache.layer2, mt, None, grad_embeddings)
    if cache.drop_mask is not None:
        dy = dy * cache.drop_mask
    V = mt[:, :, None]
    dy = dy * V
    xhat = cache.xhat
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * params.bn.gamma
    n = cache.count
    s1 = dxhat.sum(axis=(0, 1))
    s2 = (dxhat * xhat).sum(axis=(0, 1))
    dh1 = (cache.inv_std / n) * (n * dxhat - s1 - xhat * s2) * V
    g1, dx = _lstm_backward(params.layer1, cache.layer1, mt, dh1, None)

    grad_inputs = np.zeros((B, M, params.config.input_dim))
    grad_inputs[:, : cache.steps] = dx.transpose(1, 0, 2)
    grads = {
        "layer1.W": g1.W,
        "layer1.U": g1.U,
        "layer1.b": g1.b,
        "bn.gamma": dgamma,
        "bn.beta": dbeta,
        "layer2.W": g2.W,
        "layer2.U": g2.U,
        "layer2.b": g2.b,
    }
    return grads, grad_inputs


Embedder = Callable[[Sequence[FeatureSequence], int], np.ndarray]


def embed(params: ModelParams, sequences: Sequence[FeatureSequence], M: int, batch_size: int = 256) -> np.ndarray:
    """Infer-mode embeddings, one row per sequence, in input order."""
    if not sequences:
        return np.zeros((0, params.config.units))
    out = []
    for start in range(0, len(sequences), batch_size):
        x, mask = stack_batch(sequences[start : start + batch_size], M)
        emb, _ = forward(params, x, mask, mode="infer")
        out.append(emb)
    return np.concatenate(out, axis=0)


def as_embedder(model) -> Embedder:
    """Accept trained params or any ``f(sequences, M) -> array`` callable."""
    if isinstance(model, ModelParams):
        return lambda seqs, M: embed(model, seqs, M)
    if callable(model):
        return model
    raise TypeError(f"cannot embed with {type(model).__name__}")


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
