"""End-to-end wiring: train, capture, score, plan, prune, fine-tune.

These helpers keep the seed bookkeeping in one place so that the CLI, the
ablation harness, and the test suite all derive their datasets, fine-tune
shuffles, and random baselines from a single base seed.
"""

from __future__ import annotations

import numpy as np

from . import micronet
from .micronet import Dataset, MicroNet, TrainConfig
from .planner import ModelPlan, PlanConfig, PruneSpec, make_model_plan, make_random_plan
from .saliency import LayerScores, ScoreConfig, batch_scores

DEFAULT_SPECS = (
    micronet.conv(16, 3),
    micronet.relu(),
    micronet.maxpool(),
    micronet.conv(32, 3),
    micronet.relu(),
    micronet.maxpool(),
    micronet.flatten(),
    micronet.linear(4),
)

# Fixed offsets so every derived random stream is decoupled from the base seed.
TEST_DATA_OFFSET = 10_000
FINETUNE_SEED_OFFSET = 500
RANDOM_PLAN_OFFSET = 1_000

DEFAULT_TRAIN_SIZE = 400
DEFAULT_TEST_SIZE = 200
DEFAULT_CAPTURE_SIZE = 64


def default_net(seed: int) -> MicroNet:
    return MicroNet(DEFAULT_SPECS, seed=seed)


def make_datasets(seed: int, n_train: int = DEFAULT_TRAIN_SIZE,
                  n_test: int = DEFAULT_TEST_SIZE) -> tuple[Dataset, Dataset]:
    train = micronet.gen_dataset(seed, n_train)
    test = micronet.gen_dataset(seed + TEST_DATA_OFFSET, n_test)
    return train, test


def default_train_config(seed: int, epochs: int) -> TrainConfig:
    decay = (max(1, (2 * epochs) // 3),) if epochs >= 3 else ()
    return TrainConfig(decay_epochs=decay, epochs=epochs, seed=seed)


def train_baseline(seed: int, epochs: int = 30, n_train: int = DEFAULT_TRAIN_SIZE,
                   n_test: int = DEFAULT_TEST_SIZE):
    """Train the stock micro-net; returns (net, train data, test data, curve)."""
    train_data, test_data = make_datasets(seed, n_train, n_test)
    net = default_net(seed)
    trained, curve = micronet.train(
        net, train_data, default_train_config(seed, epochs), test_data=test_data
    )
    return trained, train_data, test_data, curve


def capture_batches(net: MicroNet, images: np.ndarray, capture_mode: str = "pre",
                    capture_size: int = DEFAULT_CAPTURE_SIZE):
    """Feature-map batches per conv layer for the first ``capture_size`` images."""
    _, batches = micronet.forward(
        net, images[:capture_size], capture=True, capture_mode=capture_mode
    )
    return batches


def score_layers(batches, cfg: ScoreConfig) -> list[LayerScores]:
    """Batch-averaged scores per captured layer, ascending layer order."""
    return [batch_scores(batches[i], cfg) for i in sorted(batches)]


def plan_config_from(cfg: ScoreConfig) -> PlanConfig:
    smoothing = cfg.frequency.smoothing
    return PlanConfig(
        lam=cfg.lam,
        block_size=cfg.frequency.block_size,
        sigma=None if smoothing is None else smoothing.sigma,
        smoothing="none" if smoothing is None else "gaussian",
    )


def saliency_plan(net: MicroNet, images: np.ndarray, spec: PruneSpec, cfg: ScoreConfig,
                  capture_mode: str = "pre", capture_size: int = DEFAULT_CAPTURE_SIZE,
                  created_from: str = "trained") -> ModelPlan:
    """Score the net on a capture batch and plan the prune."""
    scores = score_layers(capture_batches(net, images, capture_mode, capture_size), cfg)
    return make_model_plan(scores, spec, plan_config_from(cfg), created_from=created_from)


def random_plan(net: MicroNet, spec: PruneSpec, cfg: ScoreConfig, seed: int) -> ModelPlan:
    """Seeded random baseline with the same per-layer thresholds."""
    return make_random_plan(
        net.conv_channels(), spec, plan_config_from(cfg), seed + RANDOM_PLAN_OFFSET
    )


def prune_and_finetune(net: MicroNet, plan: ModelPlan, train_data: Dataset,
                       test_data: Dataset, seed: int, epochs: int = 15):
    """Apply the plan and fine-tune the surviving weights."""
    pruned = micronet.apply_plan(net, plan)
    cfg = default_train_config(seed + FINETUNE_SEED_OFFSET, epochs)
    return micronet.train(pruned, train_data, cfg, test_data=test_data)
