"""Micro-scale ablation sweeps.

Each sweep runs the full prune/fine-tune loop over several seeds and emits
one row per setting with mean and standard deviation of the final test
accuracy (CSV and JSON).  Rows are sorted by setting, never by completion
order, so reports are reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import micronet, pipeline
from .errors import IoFailure, UsageError
from .frequency import FrequencyConfig
from .micronet import Dataset
from .planner import PruneSpec, make_model_plan
from .saliency import ScoreConfig, recombine

KINDS = ("lambda", "block-size", "components", "init", "attack")

LAMBDA_GRID = (0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
BLOCK_GRID = (1, 2, 4, 8)
COMPONENT_GRID = ("fq", "fq_no_dist", "sp", "fq_lsp")
INIT_GRID = ("untrained", "partial_25", "partial_50", "partial_75", "trained", "random-plan")
ATTACK_EPS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class AblateOptions:
    seeds: tuple[int, ...] = (0, 1, 2)
    train_epochs: int = 30
    finetune_epochs: int = 15
    ratio: float = 0.5
    score_cfg: ScoreConfig = ScoreConfig()
    capture_mode: str = "pre"
    capture_size: int = pipeline.DEFAULT_CAPTURE_SIZE


def component_config(base: ScoreConfig, name: str) -> ScoreConfig:
    """Map an ablation row name onto metric flags."""
    if name == "fq":
        return replace(base, use_freq=True, use_spatial=False, use_dist=True)
    if name == "fq_no_dist":
        return replace(base, use_freq=True, use_spatial=False, use_dist=False)
    if name == "sp":
        return replace(base, use_freq=False, use_spatial=True)
    if name == "fq_lsp":
        return replace(base, use_freq=True, use_spatial=True, use_dist=True)
    raise UsageError(f"unknown component setting {name!r}")


def _finetuned_accuracy(net, plan, train_data, test_data, seed, epochs) -> float:
    tuned, _ = pipeline.prune_and_finetune(net, plan, train_data, test_data, seed, epochs)
    return micronet.evaluate(tuned, test_data)


def _sweep_lambda(opts: AblateOptions):
    spec = PruneSpec(ratio=opts.ratio)
    accs = {lam: [] for lam in LAMBDA_GRID}
    for seed in opts.seeds:
        net, train_data, test_data, _ = pipeline.train_baseline(seed, opts.train_epochs)
        batches = pipeline.capture_batches(
            net, train_data.images, opts.capture_mode, opts.capture_size
        )
        scores = pipeline.score_layers(batches, opts.score_cfg)
        for lam in LAMBDA_GRID:
            cfg = replace(opts.score_cfg, lam=lam)
            rescored = [recombine(s, cfg) for s in scores]
            plan = make_model_plan(rescored, spec, pipeline.plan_config_from(cfg))
            accs[lam].append(
                _finetuned_accuracy(net, plan, train_data, test_data, seed,
                                    opts.finetune_epochs)
            )
    return [{"setting": f"lambda={lam}", "lambda": lam, "values": accs[lam]}
            for lam in LAMBDA_GRID]


def _sweep_block_size(opts: AblateOptions):
    spec = PruneSpec(ratio=opts.ratio)
    accs = {bs: [] for bs in BLOCK_GRID}
    for seed in opts.seeds:
        net, train_data, test_data, _ = pipeline.train_baseline(seed, opts.train_epochs)
        for bs in BLOCK_GRID:
            freq = FrequencyConfig(block_size=bs, smoothing=opts.score_cfg.frequency.smoothing)
            cfg = replace(opts.score_cfg, frequency=freq)
            plan = pipeline.saliency_plan(
                net, train_data.images, spec, cfg, opts.capture_mode, opts.capture_size
            )
            accs[bs].append(
                _finetuned_accuracy(net, plan, train_data, test_data, seed,
                                    opts.finetune_epochs)
            )
    return [{"setting": f"block_size={bs}", "block_size": bs, "values": accs[bs]}
            for bs in BLOCK_GRID]


def _sweep_components(opts: AblateOptions):
    spec = PruneSpec(ratio=opts.ratio)
    accs = {name: [] for name in COMPONENT_GRID}
    for seed in opts.seeds:
        net, train_data, test_data, _ = pipeline.train_baseline(seed, opts.train_epochs)
        batches = pipeline.capture_batches(
            net, train_data.images, opts.capture_mode, opts.capture_size
        )
        scores = pipeline.score_layers(batches, opts.score_cfg)
        for name in COMPONENT_GRID:
            cfg = component_config(opts.score_cfg, name)
            rescored = [recombine(s, cfg) for s in scores]
            plan = make_model_plan(rescored, spec, pipeline.plan_config_from(cfg))
            accs[name].append(
                _finetuned_accuracy(net, plan, train_data, test_data, seed,
                                    opts.finetune_epochs)
            )
    return [{"setting": f"components={name}", "components": name, "values": accs[name]}
            for name in COMPONENT_GRID]


def _init_fraction(name: str) -> float | None:
    return {"untrained": 0.0, "partial_25": 0.25, "partial_50": 0.5,
            "partial_75": 0.75, "trained": 1.0}.get(name)


def _sweep_init(opts: AblateOptions):
    """Plan quality vs the training level of the network the plan was read from.

    Every row applies its plan to the checkpoint it was scored on, then
    trains with the same full budget, so rows differ only in the ranking.
    """
    spec = PruneSpec(ratio=opts.ratio)
    accs = {name: [] for name in INIT_GRID}
    for seed in opts.seeds:
        train_data, test_data = pipeline.make_datasets(seed)
        fresh = pipeline.default_net(seed)
        full_cfg = pipeline.default_train_config(seed, opts.train_epochs)
        trained_full, _ = micronet.train(fresh, train_data, full_cfg, test_data=test_data)
        for name in INIT_GRID:
            if name == "random-plan":
                checkpoint = trained_full
                plan = pipeline.random_plan(checkpoint, spec, opts.score_cfg, seed)
            else:
                frac = _init_fraction(name)
                k = int(round(frac * opts.train_epochs))
                if k == 0:
                    checkpoint = fresh
                elif k == opts.train_epochs:
                    checkpoint = trained_full
                else:
                    checkpoint, _ = micronet.train(
                        fresh, train_data, replace(full_cfg, epochs=k), test_data=None
                    )
                plan = pipeline.saliency_plan(
                    checkpoint, train_data.images, spec, opts.score_cfg,
                    opts.capture_mode, opts.capture_size,
                    created_from="untrained" if k == 0 else "trained",
                )
            pruned = micronet.apply_plan(checkpoint, plan)
            tuned, _ = micronet.train(
                pruned, train_data,
                pipeline.default_train_config(seed + pipeline.FINETUNE_SEED_OFFSET,
                                              opts.train_epochs),
                test_data=test_data,
            )
            accs[name].append(micronet.evaluate(tuned, test_data))
    return [{"setting": f"init={name}", "init": name, "values": accs[name]}
            for name in INIT_GRID]


def _attack_accuracy(net, data: Dataset, attack: str, eps: float) -> float:
    if attack == "fgsm":
        adv = micronet.fgsm(net, data.images, data.labels, eps)
    else:
        adv = micronet.pgd(net, data.images, data.labels, eps)
    return micronet.evaluate(net, Dataset(images=adv, labels=data.labels))


def _sweep_attack(opts: AblateOptions):
    spec = PruneSpec(ratio=opts.ratio)
    keys = [(attack, model, eps)
            for attack in ("fgsm", "pgd")
            for model in ("original", "pruned")
            for eps in ATTACK_EPS]
    accs = {key: [] for key in keys}
    for seed in opts.seeds:
        net, train_data, test_data, _ = pipeline.train_baseline(seed, opts.train_epochs)
        plan = pipeline.saliency_plan(
            net, train_data.images, spec, opts.score_cfg,
            opts.capture_mode, opts.capture_size,
        )
        tuned, _ = pipeline.prune_and_finetune(
            net, plan, train_data, test_data, seed, opts.finetune_epochs
        )
        for attack, model, eps in keys:
            target = net if model == "original" else tuned
            accs[(attack, model, eps)].append(_attack_accuracy(target, test_data, attack, eps))
    return [
        {
            "setting": f"{attack}/{model}/eps={eps}",
            "attack": attack,
            "model": model,
            "epsilon": eps,
            "values": accs[(attack, model, eps)],
        }
        for attack, model, eps in keys
    ]


_SWEEPS = {
    "lambda": _sweep_lambda,
    "block-size": _sweep_block_size,
    "components": _sweep_components,
    "init": _sweep_init,
    "attack": _sweep_attack,
}


def ablate(kind: str, opts: AblateOptions) -> dict:
    """Run one sweep and return the report document."""
    if kind not in _SWEEPS:
        raise UsageError(f"unknown ablation kind {kind!r}; choose from {KINDS}")
    if len(opts.seeds) < 1:
        raise UsageError("ablation needs at least one seed")
    rows = _SWEEPS[kind](opts)
    for row in rows:
        values = row["values"]
        row["mean"] = float(np.mean(values))
        row["std"] = float(np.std(values))
    return {"kind": kind, "seeds": list(opts.seeds), "rows": rows}


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    """Write ablate_<kind>.csv and .json; returns the two paths."""
    out = Path(out_dir)
    stem = f"ablate_{report['kind'].replace('-', '_')}"
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report, indent=2) + "\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "mean_acc", "std_acc", "n_seeds"])
            for row in report["rows"]:
                writer.writerow(
                    [row["setting"], repr(row["mean"]), repr(row["std"]), len(row["values"])]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write ablation report under {out}: {exc}") from exc
    return csv_path, json_path
