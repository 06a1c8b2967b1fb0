"""Central finite-difference check of loss-through-network gradients."""

import numpy as np

from keybio.learn import (
    TrainingSet,
    batch_loss_and_grads,
    sample_class_batch,
    sample_pair_batch,
    sample_triplet_batch,
)
from keybio.net import ModelConfig, init_params

H = 1e-5


def tiny_problem(seed: int, kind: str):
    """Random tiny network, data and batch for one loss kind."""
    rng = np.random.default_rng(seed)
    u = int(rng.integers(1, 9))
    M = int(rng.integers(2, 9))
    B = int(rng.integers(1, 5))
    S = 3
    cfg = ModelConfig(units=u, max_len=M, dropout=float(rng.choice([0.0, 0.5])), recurrent_dropout=float(rng.choice([0.0, 0.2])))
    params = init_params(cfg, seed, num_classes=S if kind == "softmax" else 0)
    for a in params.trainable().values():
        a += rng.normal(scale=0.3, size=a.shape)
    n = 2 * S
    x = rng.normal(scale=0.5, size=(n, M, 5))
    lengths = rng.integers(1, M + 1, size=n)
    mask = np.arange(M)[None, :] < lengths[:, None]
    x[~mask] = 0.0
    ts = TrainingSet(x, mask, np.repeat(np.arange(S), 2), [f"s{i}" for i in range(S)])
    sampler = {"triplet": sample_triplet_batch, "contrastive": sample_pair_batch, "softmax": sample_class_batch}[kind]
    batch = sampler(ts, B, rng)
    # margin large enough that triplet/contrastive terms are active
    return params, ts, batch, 1.5 + 3.0 * rng.random()


def max_relative_error(params, ts, batch, kind: str, alpha: float, dropout_seed: int = 0) -> float:
    loss_at = lambda: batch_loss_and_grads(params, ts, batch, kind, alpha, np.random.default_rng(dropout_seed))
    _, analytic = loss_at()
    worst = 0.0
    for name, a in params.trainable().items():
        num = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            orig = a[i]
            a[i] = orig + H
            lp = loss_at()[0]
            a[i] = orig - H
            lm = loss_at()[0]
            a[i] = orig
            num[i] = (lp - lm) / (2 * H)
        scale = max(np.abs(num).max(), np.abs(analytic[name]).max(), 1e-7)
        worst = max(worst, float(np.abs(num - analytic[name]).max() / scale))
    return worst
