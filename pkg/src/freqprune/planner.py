"""Turn per-layer scores into a serialized pruning plan.

Channels are ranked by combined score descending (ties broken by ascending
channel index), the lowest-scoring ``threshold`` channels per layer are
pruned, and the result is stored as sorted saved/pruned index sets.  Layers
are planned independently; compression targets are user input, supplied as
a uniform ratio, per-layer ratios, or explicit keep-counts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegeneratePlan, InvariantViolation, MalformedPlan
from .saliency import LayerScores

log = logging.getLogger(__name__)

PLAN_VERSION = 1
CREATED_FROM = ("trained", "untrained", "random-baseline")


@dataclass(frozen=True)
class PlanConfig:
    """Scoring-config fingerprint embedded in the plan document."""

    lam: float = 0.03
    block_size: int = 4
    sigma: float | None = 1.0
    smoothing: str = "gaussian"  # "gaussian" or "none"


@dataclass(frozen=True)
class LayerPlan:
    layer_index: int
    channels: int
    threshold: int
    saved: tuple[int, ...]
    pruned: tuple[int, ...]

    def validate(self) -> None:
        full = set(range(self.channels))
        saved, pruned = set(self.saved), set(self.pruned)
        if len(saved) != len(self.saved) or len(pruned) != len(self.pruned):
            raise InvariantViolation(f"layer {self.layer_index}: duplicate channel indices")
        if saved & pruned:
            raise InvariantViolation(
                f"layer {self.layer_index}: saved and pruned sets overlap"
            )
        if saved | pruned != full:
            raise InvariantViolation(
                f"layer {self.layer_index}: saved and pruned do not cover all "
                f"{self.channels} channels"
            )
        if len(self.pruned) != self.threshold:
            raise InvariantViolation(
                f"layer {self.layer_index}: |pruned|={len(self.pruned)} but "
                f"threshold={self.threshold}"
            )
        if len(self.saved) < 1:
            raise InvariantViolation(f"layer {self.layer_index}: saved set is empty")
        if list(self.saved) != sorted(self.saved) or list(self.pruned) != sorted(self.pruned):
            raise InvariantViolation(
                f"layer {self.layer_index}: index lists must be sorted ascending"
            )


@dataclass(frozen=True)
class ModelPlan:
    layers: tuple[LayerPlan, ...]
    config: PlanConfig
    created_from: str = "trained"

    def validate(self) -> None:
        if self.created_from not in CREATED_FROM:
            raise InvariantViolation(f"unknown created_from {self.created_from!r}")
        indices = [lp.layer_index for lp in self.layers]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise InvariantViolation("layer indices must be strictly increasing")
        for lp in self.layers:
            lp.validate()

    def layer(self, layer_index: int) -> LayerPlan | None:
        for lp in self.layers:
            if lp.layer_index == layer_index:
                return lp
        return None


@dataclass(frozen=True)
class PruneSpec:
    """Per-layer pruning targets: uniform ratio, per-layer ratios, or keep-counts.

    ``keep`` entries override ratios for their layer.
    """

    ratio: float | None = None
    ratios: Mapping[int, float] | None = None
    keep: Mapping[int, int] | None = None

    def validate(self) -> None:
        for r in self._all_ratios():
            if not (0.0 <= r < 1.0):
                raise InvariantViolation(f"prune ratio must be in [0, 1), got {r}")

    def _all_ratios(self):
        if self.ratio is not None:
            yield self.ratio
        if self.ratios:
            yield from self.ratios.values()

    def threshold_for(self, layer_index: int, channels: int) -> int:
        """Resolve the number of channels to prune; always leaves >= 1 saved."""
        if channels < 1:
            raise DegeneratePlan(f"layer {layer_index} has no channels")
        if self.keep is not None and layer_index in self.keep:
            keep = int(self.keep[layer_index])
            if not (1 <= keep <= channels):
                raise DegeneratePlan(
                    f"layer {layer_index}: keep-count {keep} outside [1, {channels}]"
                )
            return channels - keep
        ratio = 0.0
        if self.ratios and layer_index in self.ratios:
            ratio = float(self.ratios[layer_index])
        elif self.ratio is not None:
            ratio = float(self.ratio)
        if not (0.0 <= ratio < 1.0):
            raise InvariantViolation(f"prune ratio must be in [0, 1), got {ratio}")
        t = int(math.floor(channels * ratio + 0.5))  # round half up
        if t >= channels:
            log.warning(
                "layer %d: ratio %.3g would prune all %d channels; clamping to %d",
                layer_index, ratio, channels, channels - 1,
            )
            t = channels - 1
        return t


def rank_channels(scores: LayerScores) -> list[int]:
    """Indices by combined score descending; ties broken by ascending index."""
    if not scores.scores:
        raise InvariantViolation("cannot rank an empty score list")
    return sorted(range(len(scores.scores)), key=lambda j: (-scores.scores[j].combined, j))


def make_layer_plan(scores: LayerScores, spec: PruneSpec) -> LayerPlan:
    """Prune the lowest-scoring channels, keeping the top channels saved."""
    spec.validate()
    channels = len(scores.scores)
    threshold = spec.threshold_for(scores.layer_index, channels)
    if not (0 <= threshold < channels):
        raise DegeneratePlan(
            f"layer {scores.layer_index}: threshold {threshold} with {channels} channels"
        )
    ranking = rank_channels(scores)
    saved = tuple(sorted(ranking[: channels - threshold]))
    pruned = tuple(sorted(ranking[channels - threshold :]))
    plan = LayerPlan(
        layer_index=scores.layer_index,
        channels=channels,
        threshold=threshold,
        saved=saved,
        pruned=pruned,
    )
    plan.validate()
    return plan


def make_model_plan(
    all_scores: Sequence[LayerScores],
    spec: PruneSpec,
    config: PlanConfig,
    created_from: str = "trained",
) -> ModelPlan:
    """Assemble independent per-layer plans in ascending layer order."""
    ordered = sorted(all_scores, key=lambda s: s.layer_index)
    plan = ModelPlan(
        layers=tuple(make_layer_plan(s, spec) for s in ordered),
        config=config,
        created_from=created_from,
    )
    plan.validate()
    return plan


def make_random_plan(
    channel_counts: Mapping[int, int],
    spec: PruneSpec,
    config: PlanConfig,
    seed: int,
) -> ModelPlan:
    """Baseline: prune a uniformly random channel subset of the same size."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = []
    for layer_index in sorted(channel_counts):
        channels = int(channel_counts[layer_index])
        threshold = spec.threshold_for(layer_index, channels)
        order = rng.permutation(channels)
        pruned = tuple(sorted(int(j) for j in order[:threshold]))
        saved = tuple(sorted(int(j) for j in order[threshold:]))
        layers.append(
            LayerPlan(
                layer_index=layer_index,
                channels=channels,
                threshold=threshold,
                saved=saved,
                pruned=pruned,
            )
        )
    plan = ModelPlan(layers=tuple(layers), config=config, created_from="random-baseline")
    plan.validate()
    return plan


# --- plan document -----------------------------------------------------------

def serialize_plan(plan: ModelPlan) -> str:
    """Canonical JSON text; identical plans serialize to identical bytes."""
    plan.validate()
    doc = {
        "version": PLAN_VERSION,
        "created_from": plan.created_from,
        "config": {
            "lambda": plan.config.lam,
            "block_size": plan.config.block_size,
            "sigma": plan.config.sigma,
            "smoothing": plan.config.smoothing,
        },
        "layers": [
            {
                "layer_index": lp.layer_index,
                "channels": lp.channels,
                "threshold": lp.threshold,
                "saved": list(lp.saved),
                "pruned": list(lp.pruned),
            }
            for lp in plan.layers
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_plan(text: str) -> ModelPlan:
    """Parse and fully validate a plan document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedPlan(f"plan is not valid JSON: {exc}") from exc
    try:
        if doc["version"] != PLAN_VERSION:
            raise MalformedPlan(f"unsupported plan version {doc['version']!r}")
        cfg_doc = doc["config"]
        config = PlanConfig(
            lam=float(cfg_doc["lambda"]),
            block_size=int(cfg_doc["block_size"]),
            sigma=None if cfg_doc["sigma"] is None else float(cfg_doc["sigma"]),
            smoothing=str(cfg_doc["smoothing"]),
        )
        layers = tuple(
            LayerPlan(
                layer_index=int(lp["layer_index"]),
                channels=int(lp["channels"]),
                threshold=int(lp["threshold"]),
                saved=tuple(int(j) for j in lp["saved"]),
                pruned=tuple(int(j) for j in lp["pruned"]),
            )
            for lp in doc["layers"]
        )
        plan = ModelPlan(layers=layers, config=config, created_from=str(doc["created_from"]))
    except MalformedPlan:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedPlan(f"plan document missing or mistyped field: {exc}") from exc
    plan.validate()
    return plan
