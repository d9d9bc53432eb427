"""Command-line driver.

Subcommands wire the pipeline stages together: ``capture`` trains the
micro-net and dumps feature maps, ``score`` ranks channels, ``plan`` emits
a pruning plan, ``apply`` performs the surgery, ``train`` fine-tunes,
``eval`` measures accuracy, and ``ablate`` runs the sweep harness.

Option precedence is flags > config file > built-in defaults.  The config
file is plain ``key = value`` text where keys are long flag names.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path

from . import ablate as ablate_mod
from . import micronet, pipeline
from .errors import DataError, IoFailure, ToolError, UsageError
from .frequency import FrequencyConfig, GaussianSmoothing
from .planner import (
    PlanConfig,
    PruneSpec,
    make_model_plan,
    make_random_plan,
    parse_plan,
    serialize_plan,
)
from .saliency import ScoreConfig, batch_scores, layer_from_report, layer_report
from .tensors import load_feature_dump, save_feature_dump


@dataclass(frozen=True)
class Opt:
    flag: str
    default: object = None
    type: type | None = str
    choices: tuple | None = None
    help: str = ""

    @property
    def dest(self) -> str:
        name = self.flag.lstrip("-").replace("-", "_")
        return "lam" if name == "lambda" else name


_COMMON = (
    Opt("--seed", 0, int, help="base seed for every random draw"),
    Opt("--out-dir", ".", str, help="directory for all outputs"),
    Opt("--config", None, str, help="key=value config file (flags override it)"),
)

_SCORE_METRIC = (
    Opt("--lambda", 0.03, float, help="spatial regularizer weight"),
    Opt("--block-size", 4, int, help="DCT tile size"),
    Opt("--sigma", 1.0, float, help="Gaussian prefilter sigma"),
    Opt("--kernel-size", 3, int, help="Gaussian kernel side (odd)"),
    Opt("--no-smoothing", False, None, help="disable the Gaussian prefilter"),
    Opt("--no-dist", False, None, help="drop the frequency-spread factor"),
    Opt("--freq-only", False, None, help="rank by the frequency metric alone"),
    Opt("--spatial-only", False, None, help="rank by the spatial norm alone"),
)

_TRAIN_SHAPE = (
    Opt("--train-size", pipeline.DEFAULT_TRAIN_SIZE, int),
    Opt("--test-size", pipeline.DEFAULT_TEST_SIZE, int),
)

_SUBCOMMANDS = {
    "capture": _COMMON + _TRAIN_SHAPE + (
        Opt("--epochs", 30, int, help="training epochs before capture"),
        Opt("--capture", "pre", str, ("pre", "post"), "hook point for feature maps"),
        Opt("--capture-size", pipeline.DEFAULT_CAPTURE_SIZE, int),
    ),
    "score": _COMMON + _SCORE_METRIC + (
        Opt("--features", None, str, help="directory of layer_<i>.cfd dumps"),
    ),
    "plan": _COMMON + (
        Opt("--scores", None, str, help="scores.json from the score step"),
        Opt("--ratio", None, float, help="uniform prune ratio in [0, 1)"),
        Opt("--ratios", None, str, help="per-layer ratios, e.g. 0=0.5,1=0.25"),
        Opt("--created-from", "trained", str, ("trained", "untrained")),
        Opt("--random-baseline", False, None, help="seeded random ranking baseline"),
    ),
    "apply": _COMMON + (
        Opt("--weights", None, str, help="weight-store directory"),
        Opt("--plan", None, str, help="plan.json to apply"),
    ),
    "train": _COMMON + _TRAIN_SHAPE + (
        Opt("--weights", None, str, help="weight-store directory to fine-tune"),
        Opt("--epochs", 15, int),
    ),
    "eval": _COMMON + (
        Opt("--weights", None, str, help="weight-store directory to evaluate"),
        Opt("--test-size", pipeline.DEFAULT_TEST_SIZE, int),
    ),
    "ablate": _COMMON + _SCORE_METRIC + (
        Opt("--kind", None, str, ablate_mod.KINDS, "which sweep to run"),
        Opt("--seeds", 3, int, help="number of seeds (base seed, base+1, ...)"),
        Opt("--epochs", 30, int, help="baseline training epochs"),
        Opt("--finetune-epochs", 15, int),
        Opt("--ratio", 0.5, float),
        Opt("--capture", "pre", str, ("pre", "post")),
        Opt("--capture-size", pipeline.DEFAULT_CAPTURE_SIZE, int),
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); exit code 2 is ours
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="freqprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, opts in _SUBCOMMANDS.items():
        p = sub.add_parser(name)  # inherits _Parser, so errors raise UsageError
        for opt in opts:
            if opt.type is None:
                p.add_argument(opt.flag, dest=opt.dest, action="store_true",
                               default=argparse.SUPPRESS, help=opt.help)
            else:
                p.add_argument(opt.flag, dest=opt.dest, type=opt.type,
                               choices=opt.choices, default=argparse.SUPPRESS,
                               help=opt.help)
    return parser


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_config_file(path: str, opts) -> dict:
    """key = value lines; '#' starts a comment; keys are long flag names."""
    by_key = {o.flag.lstrip("-"): o for o in opts}
    by_key.update({o.dest: o for o in opts})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        opt = by_key.get(key) or by_key.get(key.replace("_", "-"))
        if opt is None:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        if opt.type is None:
            if value.lower() not in _BOOL_WORDS:
                raise UsageError(f"{path}:{lineno}: {key} expects true/false")
            values[opt.dest] = _BOOL_WORDS[value.lower()]
        else:
            try:
                parsed = opt.type(value)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
            if opt.choices and parsed not in opt.choices:
                raise UsageError(f"{path}:{lineno}: {key} must be one of {opt.choices}")
            values[opt.dest] = parsed
    return values


def _merge_options(ns: argparse.Namespace, opts) -> dict:
    merged = {opt.dest: opt.default for opt in opts}
    explicit = vars(ns)
    config_path = explicit.get("config", merged.get("config"))
    if config_path:
        merged.update(_parse_config_file(config_path, opts))
    merged.update({k: v for k, v in explicit.items() if k != "command"})
    return merged


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) is None:
        raise UsageError(f"{flag} is required")
    return cfg[key]


def _score_config(cfg: dict) -> ScoreConfig:
    if cfg["block_size"] < 1:
        raise UsageError(f"--block-size must be >= 1, got {cfg['block_size']}")
    if not (math.isfinite(cfg["sigma"]) and cfg["sigma"] > 0):
        raise UsageError(f"--sigma must be a positive real, got {cfg['sigma']}")
    if cfg["kernel_size"] < 1 or cfg["kernel_size"] % 2 == 0:
        raise UsageError(f"--kernel-size must be odd and >= 1, got {cfg['kernel_size']}")
    if not math.isfinite(cfg["lam"]):
        raise UsageError(f"--lambda must be finite, got {cfg['lam']}")
    if cfg["freq_only"] and cfg["spatial_only"]:
        raise UsageError("--freq-only and --spatial-only are mutually exclusive")
    smoothing = None if cfg["no_smoothing"] else GaussianSmoothing(
        sigma=cfg["sigma"], kernel_size=cfg["kernel_size"]
    )
    return ScoreConfig(
        lam=cfg["lam"],
        use_dist=not cfg["no_dist"],
        use_freq=not cfg["spatial_only"],
        use_spatial=not cfg["freq_only"],
        frequency=FrequencyConfig(block_size=cfg["block_size"], smoothing=smoothing),
    )


def _parse_ratios(text: str) -> dict[int, float]:
    ratios = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*=\s*([0-9.eE+-]+)", part)
        if not m:
            raise UsageError(f"--ratios entries must look like i=r, got {part!r}")
        ratios[int(m.group(1))] = float(m.group(2))
    if not ratios:
        raise UsageError("--ratios is empty")
    return ratios


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=2) + "\n")


# --- subcommands ---------------------------------------------------------------

def _cmd_capture(cfg: dict) -> None:
    if cfg["epochs"] < 0:
        raise UsageError(f"--epochs must be >= 0, got {cfg['epochs']}")
    if cfg["capture_size"] < 1:
        raise UsageError(f"--capture-size must be >= 1, got {cfg['capture_size']}")
    out = _out_dir(cfg)
    seed = cfg["seed"]
    net, train_data, test_data, curve = pipeline.train_baseline(
        seed, cfg["epochs"], cfg["train_size"], cfg["test_size"]
    )
    micronet.save_weights(net, out / "weights")
    if curve:
        micronet.write_curve(curve, out / "train_curve.csv")
    batches = pipeline.capture_batches(
        net, train_data.images, cfg["capture"], cfg["capture_size"]
    )
    features = out / "features"
    features.mkdir(parents=True, exist_ok=True)
    for ci, batch in sorted(batches.items()):
        save_feature_dump(batch, features / f"layer_{ci}.cfd")
    print(f"capture: weights, {len(batches)} feature dumps -> {out}")


def _cmd_score(cfg: dict) -> None:
    features = Path(_require(cfg, "features", "--features"))
    score_cfg = _score_config(cfg)
    name_re = re.compile(r"layer_(\d+)\.cfd$")
    files = sorted(
        (p for p in features.glob("layer_*.cfd") if name_re.fullmatch(p.name)),
        key=lambda p: int(name_re.fullmatch(p.name).group(1)),
    )
    if not files:
        raise DataError(f"no layer_<i>.cfd files in {features}")
    reports = []
    for path in files:
        batch = load_feature_dump(path)
        reports.append(layer_report(batch_scores(batch, score_cfg), score_cfg))
    out = _out_dir(cfg)
    freq = score_cfg.frequency
    doc = {
        "config": {
            "lambda": score_cfg.lam,
            "block_size": freq.block_size,
            "sigma": None if freq.smoothing is None else freq.smoothing.sigma,
            "smoothing": "none" if freq.smoothing is None else "gaussian",
        },
        "layers": reports,
    }
    _write_json(out / "scores.json", doc)
    print(f"score: {len(reports)} layers -> {out / 'scores.json'}")


def _read_scores_doc(path: Path):
    """Accepts the scores.json wrapper, a bare list of per-layer documents,
    or a single per-layer document; returns (LayerScores list, PlanConfig)."""
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    defaults = PlanConfig()
    cfg_doc: dict = {}
    if isinstance(doc, dict) and "layers" in doc:
        layer_docs = doc["layers"]
        cfg_doc = doc.get("config", {})
    elif isinstance(doc, dict) and "scores" in doc:
        layer_docs = [doc]
    elif isinstance(doc, list):
        layer_docs = doc
    else:
        raise DataError(f"{path}: not a recognizable scores document")
    if not layer_docs:
        raise DataError(f"{path}: no layers in scores document")
    try:
        layers = [layer_from_report(d) for d in layer_docs]
    except ToolError:
        raise
    except (TypeError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed score entries: {exc}") from exc
    # Bare documents carry lambda/block_size per layer; the wrapper also
    # records the smoothing settings.
    if not cfg_doc and isinstance(layer_docs[0], dict):
        cfg_doc = {"lambda": layer_docs[0].get("lambda"),
                   "block_size": layer_docs[0].get("block_size")}
    try:
        lam = cfg_doc.get("lambda")
        block_size = cfg_doc.get("block_size")
        sigma = cfg_doc.get("sigma", defaults.sigma)
        plan_cfg = PlanConfig(
            lam=defaults.lam if lam is None else float(lam),
            block_size=defaults.block_size if block_size is None else int(block_size),
            sigma=None if sigma is None else float(sigma),
            smoothing=str(cfg_doc.get("smoothing", defaults.smoothing)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed config block: {exc}") from exc
    return layers, plan_cfg


def _cmd_plan(cfg: dict) -> None:
    scores_path = Path(_require(cfg, "scores", "--scores"))
    if cfg["ratio"] is None and cfg["ratios"] is None:
        raise UsageError("one of --ratio or --ratios is required")
    if cfg["ratio"] is not None and not (0.0 <= cfg["ratio"] < 1.0):
        raise UsageError(f"--ratio must be in [0, 1), got {cfg['ratio']}")
    ratios = _parse_ratios(cfg["ratios"]) if cfg["ratios"] is not None else None
    if ratios and any(not (0.0 <= r < 1.0) for r in ratios.values()):
        raise UsageError("--ratios values must be in [0, 1)")
    spec = PruneSpec(ratio=cfg["ratio"], ratios=ratios)
    layers, plan_cfg = _read_scores_doc(scores_path)
    if cfg["random_baseline"]:
        counts = {s.layer_index: len(s.scores) for s in layers}
        plan = make_random_plan(counts, spec, plan_cfg,
                                cfg["seed"] + pipeline.RANDOM_PLAN_OFFSET)
    else:
        plan = make_model_plan(layers, spec, plan_cfg, created_from=cfg["created_from"])
    out = _out_dir(cfg)
    _write_text(out / "plan.json", serialize_plan(plan))
    pruned = sum(lp.threshold for lp in plan.layers)
    total = sum(lp.channels for lp in plan.layers)
    print(f"plan: pruning {pruned}/{total} channels -> {out / 'plan.json'}")


def _cmd_apply(cfg: dict) -> None:
    weights = _require(cfg, "weights", "--weights")
    plan_path = Path(_require(cfg, "plan", "--plan"))
    try:
        text = plan_path.read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {plan_path}: {exc}") from exc
    plan = parse_plan(text)
    net = micronet.load_weights(weights)
    pruned = micronet.apply_plan(net, plan)
    out = _out_dir(cfg)
    micronet.save_weights(pruned, out / "pruned")
    print(f"apply: {net.num_params()} -> {pruned.num_params()} params "
          f"-> {out / 'pruned'}")


def _cmd_train(cfg: dict) -> None:
    weights = _require(cfg, "weights", "--weights")
    if cfg["epochs"] < 0:
        raise UsageError(f"--epochs must be >= 0, got {cfg['epochs']}")
    net = micronet.load_weights(weights)
    seed = cfg["seed"]
    train_data, test_data = pipeline.make_datasets(
        seed, cfg["train_size"], cfg["test_size"]
    )
    tuned, curve = micronet.train(
        net, train_data,
        pipeline.default_train_config(seed + pipeline.FINETUNE_SEED_OFFSET, cfg["epochs"]),
        test_data=test_data,
    )
    out = _out_dir(cfg)
    micronet.save_weights(tuned, out / "finetuned")
    if curve:
        micronet.write_curve(curve, out / "finetune_curve.csv")
    acc = micronet.evaluate(tuned, test_data)
    print(f"train: test accuracy {acc:.4f} -> {out / 'finetuned'}")


def _cmd_eval(cfg: dict) -> None:
    weights = _require(cfg, "weights", "--weights")
    net = micronet.load_weights(weights)
    _, test_data = pipeline.make_datasets(cfg["seed"], n_test=cfg["test_size"])
    acc = micronet.evaluate(net, test_data)
    out = _out_dir(cfg)
    _write_json(out / "eval.json", {"test_acc": acc, "params": net.num_params()})
    print(f"eval: test accuracy {acc:.4f}")


def _cmd_ablate(cfg: dict) -> None:
    kind = _require(cfg, "kind", "--kind")
    if cfg["seeds"] < 1:
        raise UsageError(f"--seeds must be >= 1, got {cfg['seeds']}")
    if not (0.0 <= cfg["ratio"] < 1.0):
        raise UsageError(f"--ratio must be in [0, 1), got {cfg['ratio']}")
    if cfg["epochs"] < 0 or cfg["finetune_epochs"] < 0:
        raise UsageError("--epochs and --finetune-epochs must be >= 0")
    opts = ablate_mod.AblateOptions(
        seeds=tuple(cfg["seed"] + i for i in range(cfg["seeds"])),
        train_epochs=cfg["epochs"],
        finetune_epochs=cfg["finetune_epochs"],
        ratio=cfg["ratio"],
        score_cfg=_score_config(cfg),
        capture_mode=cfg["capture"],
        capture_size=cfg["capture_size"],
    )
    report = ablate_mod.ablate(kind, opts)
    csv_path, json_path = ablate_mod.write_report(report, _out_dir(cfg))
    for row in report["rows"]:
        print(f"{row['setting']}: {row['mean']:.4f} +/- {row['std']:.4f}")
    print(f"ablate: {len(report['rows'])} rows -> {csv_path}, {json_path}")


_HANDLERS = {
    "capture": _cmd_capture,
    "score": _cmd_score,
    "plan": _cmd_plan,
    "apply": _cmd_apply,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
}


def run(argv) -> int:
    """Execute one subcommand; returns the exit code."""
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a subcommand is required (see --help)")
        cfg = _merge_options(ns, _SUBCOMMANDS[ns.command])
        _HANDLERS[ns.command](cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ToolError as exc:
        kind = "data error" if exc.exit_code == 2 else "invariant violation"
        print(f"{kind}: {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
