"""Losses, pair/triplet sampling, Adam and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import FeatureSequence, stack_batch
from .net import ModelConfig, ModelParams, backward, forward, init_head, init_params
from .seeding import derive_rng

log = logging.getLogger(__name__)

LOSS_KINDS = ("softmax", "contrastive", "triplet")


class InsufficientDataError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    loss: str = "triplet"
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    margin: float = 1.5
    epochs: int = 200
    batches_per_epoch: int = 150
    batch_size: int = 512
    num_classes: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, batches_per_epoch >= 1, batch_size >= 1 required")


# --------------------------------------------------------------------------
# distances and losses


def euclidean_distance(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Euclidean distance along the last axis."""
    e1, e2 = np.asarray(e1, dtype=float), np.asarray(e2, dtype=float)
    if e1.shape[-1] != e2.shape[-1]:
        raise ValueError(f"dimension mismatch: {e1.shape[-1]} vs {e2.shape[-1]}")
    diff = e1 - e2
    return np.sqrt(np.sum(diff * diff, axis=-1))


def softmax_loss(logits, true_class):
    """Cross-entropy of softmax(logits) and its gradient w.r.t. the logits.

    Works on one logit vector or a batch (rows) with one class per row.
    """
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    cls = np.atleast_1d(np.asarray(true_class))
    C = z.shape[1]
    if C < 2:
        raise ValueError("need at least 2 classes")
    if cls.shape[0] != z.shape[0] or (cls < 0).any() or (cls >= C).any():
        raise IndexError(f"true_class out of range for {C} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = log_norm - shifted[rows, cls]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, cls] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def contrastive_loss(d, label, alpha: float):
    """Per-pair contrastive loss (label 0 genuine, 1 impostor) and dLoss/dd."""
    d = np.asarray(d, dtype=float)
    L = np.asarray(label, dtype=float)
    gap = np.maximum(0.0, alpha - d)
    loss = (1 - L) * d * d / 2 + L * gap * gap / 2
    dd = (1 - L) * d - L * gap
    return loss, dd


def triplet_loss(d_ap, d_an, alpha: float):
    """max(0, d_ap^2 - d_an^2 + alpha) and its derivatives w.r.t. both distances."""
    d_ap = np.asarray(d_ap, dtype=float)
    d_an = np.asarray(d_an, dtype=float)
    raw = d_ap * d_ap - d_an * d_an + alpha
    active = raw > 0
    loss = np.where(active, raw, 0.0)
    return loss, (np.where(active, 2 * d_ap, 0.0), np.where(active, -2 * d_an, 0.0))


def pair_objective(ea: np.ndarray, eb: np.ndarray, labels: np.ndarray, alpha: float):
    """Mean contrastive loss over a pair batch and its gradients w.r.t. both branches."""
    diff = ea - eb
    d = np.sqrt(np.sum(diff * diff, axis=1))
    loss, dd = contrastive_loss(d, labels, alpha)
    # d/d(ea) of d is diff/d; the genuine branch uses d*diff/d = diff to stay defined at d=0
    L = np.asarray(labels, dtype=float)
    safe = np.where(d > 0, d, 1.0)
    coef = (1 - L) + L * np.where(d > 0, -np.maximum(0.0, alpha - d) / safe, 0.0)
    g = coef[:, None] * diff / len(d)
    return float(loss.mean()), g, -g


def triplet_objective(ea: np.ndarray, ep: np.ndarray, en: np.ndarray, alpha: float):
    """Mean triplet loss with squared distances; gradients for anchor, positive, negative."""
    dap = ea - ep
    dan = ea - en
    raw = np.sum(dap * dap, axis=1) - np.sum(dan * dan, axis=1) + alpha
    active = (raw > 0).astype(float)[:, None] / len(raw)
    ga = 2 * (en - ep) * active
    gp = -2 * dap * active
    gn = 2 * dan * active
    return float(np.maximum(raw, 0.0).mean()), ga, gp, gn


# --------------------------------------------------------------------------
# sampling


@dataclass
class TrainingSet:
    """Padded inputs for every training sequence plus subject labels."""

    x: np.ndarray  # N x M x 5
    mask: np.ndarray  # N x M
    labels: np.ndarray  # N, integer subject index
    subjects: list[str]
    index: np.ndarray = field(init=False)  # S x max_per_subject, -1 padded
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        S = len(self.subjects)
        self.counts = np.bincount(self.labels, minlength=S)
        width = int(self.counts.max()) if S else 0
        self.index = np.full((S, width), -1, dtype=np.int64)
        fill = np.zeros(S, dtype=np.int64)
        for i, s in enumerate(self.labels):
            self.index[s, fill[s]] = i
            fill[s] += 1

    @classmethod
    def from_sequences(cls, seqs: Sequence[FeatureSequence], M: int) -> "TrainingSet":
        subjects: dict[str, int] = {}
        labels = np.array([subjects.setdefault(s.subject_id, len(subjects)) for s in seqs], dtype=np.int64)
        x, mask = stack_batch(seqs, M)
        return cls(x, mask, labels, list(subjects))

    @property
    def num_subjects(self) -> int:
        return len(self.subjects)


@dataclass
class PairBatch:
    a: np.ndarray  # sequence indices
    b: np.ndarray
    labels: np.ndarray  # 0 genuine, 1 impostor

    def inputs(self, ts: TrainingSet):
        return ts.x[self.a], ts.mask[self.a], ts.x[self.b], ts.mask[self.b]


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def inputs(self, ts: TrainingSet):
        return tuple(
            arr for idx in (self.anchor, self.positive, self.negative) for arr in (ts.x[idx], ts.mask[idx])
        )


def _check_metric_data(ts: TrainingSet) -> None:
    if ts.num_subjects < 2:
        raise InsufficientDataError("need at least 2 subjects")
    if (ts.counts < 2).any():
        raise InsufficientDataError("every subject needs at least 2 sequences")


def _two_distinct(ts: TrainingSet, subj: np.ndarray, rng: np.random.Generator):
    n = ts.counts[subj]
    i = (rng.random(len(subj)) * n).astype(np.int64)
    j = (rng.random(len(subj)) * (n - 1)).astype(np.int64)
    j += j >= i
    return ts.index[subj, i], ts.index[subj, j]


def _one_of(ts: TrainingSet, subj: np.ndarray, rng: np.random.Generator):
    i = (rng.random(len(subj)) * ts.counts[subj]).astype(np.int64)
    return ts.index[subj, i]


def _other_subject(S: int, subj: np.ndarray, rng: np.random.Generator):
    other = rng.integers(0, S - 1, size=len(subj))
    return other + (other >= subj)


def sample_pair_batch(ts: TrainingSet, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Half genuine pairs (two sessions of one subject), half impostor pairs."""
    _check_metric_data(ts)
    S = ts.num_subjects
    n_gen = (batch_size + 1) // 2
    n_imp = batch_size - n_gen
    gs = rng.integers(0, S, size=n_gen)
    ga, gb = _two_distinct(ts, gs, rng)
    s1 = rng.integers(0, S, size=n_imp)
    s2 = _other_subject(S, s1, rng)
    ia, ib = _one_of(ts, s1, rng), _one_of(ts, s2, rng)
    labels = np.concatenate([np.zeros(n_gen, dtype=np.int64), np.ones(n_imp, dtype=np.int64)])
    return PairBatch(np.concatenate([ga, ia]), np.concatenate([gb, ib]), labels)


def sample_triplet_batch(ts: TrainingSet, batch_size: int, rng: np.random.Generator) -> TripletBatch:
    _check_metric_data(ts)
    S = ts.num_subjects
    anchor_subj = rng.integers(0, S, size=batch_size)
    a, p = _two_distinct(ts, anchor_subj, rng)
    n = _one_of(ts, _other_subject(S, anchor_subj, rng), rng)
    return TripletBatch(a, p, n)


def sample_class_batch(ts: TrainingSet, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, len(ts.labels), size=batch_size)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("parameter, gradient and state names differ")
    state.t += 1
    b1, b2, t = cfg.beta1, cfg.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return params, state


# --------------------------------------------------------------------------
# training


def batch_loss_and_grads(params: ModelParams, ts: TrainingSet, batch, kind: str, alpha: float, rng):
    """Loss of one batch through the shared network and all parameter gradients.

    Every branch runs through the same ``params`` in one concatenated pass,
    so branch gradients accumulate into a single set of arrays.
    """
    if kind == "triplet":
        xa, ma, xp, mp, xn, mn = batch.inputs(ts)
        B = len(xa)
        emb, cache = forward(params, np.concatenate([xa, xp, xn]), np.concatenate([ma, mp, mn]), "train", rng)
        loss, ga, gp, gn = triplet_objective(emb[:B], emb[B : 2 * B], emb[2 * B :], alpha)
        grads, _ = backward(params, cache, np.concatenate([ga, gp, gn]))
    elif kind == "contrastive":
        xa, ma, xb, mb = batch.inputs(ts)
        B = len(xa)
        emb, cache = forward(params, np.concatenate([xa, xb]), np.concatenate([ma, mb]), "train", rng)
        loss, ga, gb = pair_objective(emb[:B], emb[B:], batch.labels, alpha)
        grads, _ = backward(params, cache, np.concatenate([ga, gb]))
    elif kind == "softmax":
        head = params.classifier
        if head is None:
            raise ValueError("softmax training needs a classifier head")
        idx = batch
        emb, cache = forward(params, ts.x[idx], ts.mask[idx], "train", rng)
        logits = emb @ head.W.T + head.b
        losses, dlogits = softmax_loss(logits, ts.labels[idx])
        dlogits /= len(idx)
        grads, _ = backward(params, cache, dlogits @ head.W)
        grads["head.W"] = dlogits.T @ emb
        grads["head.b"] = dlogits.sum(axis=0)
        loss = float(losses.mean())
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return loss, grads


def sample_batch(ts: TrainingSet, kind: str, batch_size: int, rng):
    if kind == "triplet":
        return sample_triplet_batch(ts, batch_size, rng)
    if kind == "contrastive":
        return sample_pair_batch(ts, batch_size, rng)
    return sample_class_batch(ts, batch_size, rng)


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    val_eer: list[float | None] = field(default_factory=list)
    wall_clock: float = 0.0
    optimizer: AdamState | None = None

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,val_eer"]
        for i, (loss, eer) in enumerate(zip(self.mean_loss, self.val_eer), start=1):
            lines.append(f"{i},{loss!r},{'' if eer is None else repr(eer)}")
        return "\n".join(lines) + "\n"


def train(
    dataset: Sequence[FeatureSequence] | TrainingSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    init: ModelParams | None = None,
    optimizer: AdamState | None = None,
    validate: Callable[[ModelParams], float] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
):
    """Train the embedding network; returns ``(params, history)``.

    ``init``/``optimizer`` resume an earlier run. In softmax mode the
    returned params keep the classifier head (needed to resume); embeddings
    never use it.
    """
    train_config.validate()
    model_config.validate()
    ts = dataset if isinstance(dataset, TrainingSet) else TrainingSet.from_sequences(dataset, model_config.max_len)
    kind = train_config.loss
    if kind == "softmax":
        C = train_config.num_classes or ts.num_subjects
        if C < 2 or ts.num_subjects < 2:
            raise InsufficientDataError("softmax training needs at least 2 classes")
        if C != ts.num_subjects:
            raise ValueError(f"num_classes={C} but training set has {ts.num_subjects} subjects")
    else:
        _check_metric_data(ts)

    params = init.copy() if init is not None else init_params(model_config, train_config.seed)
    if kind == "softmax" and params.classifier is None:
        params.classifier = init_head(model_config.units, C, derive_rng(train_config.seed, "init.head"))
    if kind != "softmax":
        params.classifier = None
    trainable = params.trainable()
    state = optimizer if optimizer is not None else AdamState.zeros_like(trainable)
    if state.m.keys() != trainable.keys():
        raise ValueError("optimizer state does not match the parameters")

    start_t = state.t
    sample_rng = derive_rng(train_config.seed, f"train.sampling@{start_t}")
    dropout_rng = derive_rng(train_config.seed, f"train.dropout@{start_t}")
    history = TrainHistory(optimizer=state)
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are caught below
        _run_epochs(params, ts, kind, train_config, trainable, state, sample_rng, dropout_rng, history, validate, on_epoch)
    history.wall_clock = time.perf_counter() - t0
    return params, history


def _run_epochs(params, ts, kind, train_config, trainable, state, sample_rng, dropout_rng, history, validate, on_epoch):
    for epoch in range(train_config.epochs):
        total = 0.0
        for _ in range(train_config.batches_per_epoch):
            batch = sample_batch(ts, kind, train_config.batch_size, sample_rng)
            loss, grads = batch_loss_and_grads(params, ts, batch, kind, train_config.margin, dropout_rng)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at step {state.t + 1}")
            adam_step(trainable, grads, state, train_config)
            total += loss
        if not params.all_finite():
            raise NumericalError(f"non-finite parameters after epoch {epoch + 1}")
        mean = total / train_config.batches_per_epoch
        history.mean_loss.append(mean)
        history.val_eer.append(validate(params) if validate is not None else None)
        log.info("epoch %d  loss %.6f", epoch + 1, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
