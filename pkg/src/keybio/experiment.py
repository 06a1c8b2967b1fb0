"""Scaled-down synthetic end-to-end run: generate, split, train, evaluate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .data import SynthConfig, extract_features, generate_synthetic, split_subjects
from .evaluation import run_auth_protocol
from .learn import TrainConfig, TrainHistory, train
from .net import ModelConfig, ModelParams, init_params
from .seeding import derive_rng


@dataclass
class EndToEndConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(num_subjects=150, seed=1))
    train_subjects: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    # lower-rate variant: 0.05 collapses triplet training on this data
    training: TrainConfig = field(
        default_factory=lambda: TrainConfig(loss="triplet", learning_rate=0.002, epochs=12, batches_per_epoch=100, batch_size=64, seed=1)
    )
    k: int = 50
    galleries: tuple[int, ...] = (1, 5)
    split_seed: int = 1
    protocol_seed: int = 1


@dataclass
class EndToEndResult:
    params: ModelParams
    baseline: ModelParams
    history: TrainHistory
    eer: dict[int, float]  # G -> mean EER (%)
    baseline_eer: dict[int, float]
    train_set: list
    test_set: list
    seconds: float


def auth_eers(model, test_set, cfg: EndToEndConfig) -> dict[int, float]:
    out = {}
    for G in cfg.galleries:
        rng = derive_rng(cfg.protocol_seed, "auth.protocol")
        out[G] = run_auth_protocol(model, test_set, G, cfg.model.max_len, cfg.k, rng).mean_eer
    return out


def run_end_to_end(cfg: EndToEndConfig | None = None, on_epoch=None) -> EndToEndResult:
    cfg = cfg or EndToEndConfig()
    t0 = time.perf_counter()
    feats = [extract_features(s) for s in generate_synthetic(cfg.synth)]
    frac = cfg.train_subjects / cfg.synth.num_subjects
    train_set, test_set = split_subjects(feats, frac, cfg.split_seed)
    baseline = init_params(cfg.model, cfg.training.seed)
    params, history = train(train_set, cfg.model, cfg.training, on_epoch=on_epoch)
    return EndToEndResult(
        params=params,
        baseline=baseline,
        history=history,
        eer=auth_eers(params, test_set, cfg),
        baseline_eer=auth_eers(baseline, test_set, cfg),
        train_set=train_set,
        test_set=test_set,
        seconds=time.perf_counter() - t0,
    )


def loss_comparison(cfg: EndToEndConfig | None = None, losses=("triplet", "contrastive", "softmax")) -> dict[str, dict[int, float]]:
    """Same data and budget for each loss kind; mean EER per gallery size."""
    cfg = cfg or EndToEndConfig()
    out = {}
    for kind in losses:
        run = run_end_to_end(replace(cfg, training=replace(cfg.training, loss=kind)))
        out[kind] = run.eer
    return out


def summarize(result: EndToEndResult) -> str:
    lines = [f"wall_clock_s={result.seconds:.1f}"]
    for G in sorted(result.eer):
        lines.append(f"G={G} trained_eer={result.eer[G]:.2f} random_init_eer={result.baseline_eer[G]:.2f}")
    lines.append("final_loss=" + (f"{result.history.mean_loss[-1]:.4f}" if result.history.mean_loss else "n/a"))
    return "\n".join(lines)

