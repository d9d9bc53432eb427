"""Minimal convolutional classifier used as the desk-scale testbed.

Plain stack of conv (stride 1, odd kernel, same padding), relu, 2x2 max
pool, flatten, and linear layers over 1-channel 16x16 inputs.  Everything
is numpy: forward, backward, SGD with momentum and weight decay, channel
surgery from a pruning plan, and FGSM/PGD attacks.  All randomness flows
from explicit seeds and per-image reductions run in ascending index order,
so identical seeds reproduce identical weights bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DivergedLoss,
    EmptySavedSet,
    InvariantViolation,
    IoFailure,
    PlanMismatch,
    ShapeMismatch,
)
from .planner import ModelPlan
from .tensors import FeatureMapBatch, load_feature_dump, save_feature_dump

IMAGE_SIDE = 16
NUM_CLASSES = 4


# --- layer schema -------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool | flatten | linear
    out_channels: int = 0
    kernel: int = 0
    out_features: int = 0


def conv(out_channels: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec(kind="conv", out_channels=out_channels, kernel=kernel)


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


def maxpool() -> LayerSpec:
    return LayerSpec(kind="maxpool")


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def linear(out_features: int) -> LayerSpec:
    return LayerSpec(kind="linear", out_features=out_features)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = ()
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise InvariantViolation("learning_rate, momentum, weight_decay must be >= 0")
        if self.lr_decay_factor <= 0:
            raise InvariantViolation("lr_decay_factor must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvariantViolation("epochs must be >= 0 and batch_size >= 1")


# --- dataset ------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 16, 16) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, classes)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise InvariantViolation(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )


def _class_templates() -> np.ndarray:
    lo, hi = 0.25, 0.75
    y, x = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    horiz = np.where((y // 2) % 2 == 0, hi, lo)
    vert = np.where((x // 2) % 2 == 0, hi, lo)
    checker = np.where(((y // 2) + (x // 2)) % 2 == 0, hi, lo)
    center = (IMAGE_SIDE - 1) / 2.0
    disk = np.where((y - center) ** 2 + (x - center) ** 2 <= 5.0**2, hi, lo)
    return np.stack([horiz, vert, checker, disk]).astype(np.float64)


def gen_dataset(seed: int, n: int, classes: int = 4, noise: float = 0.2) -> Dataset:
    """Balanced synthetic 4-class 16x16 grayscale set, deterministic in (seed, n)."""
    if classes != NUM_CLASSES:
        raise InvariantViolation(f"only {NUM_CLASSES} classes are supported, got {classes}")
    if n < classes:
        raise InvariantViolation(f"need at least {classes} samples, got {n}")
    if noise < 0:
        raise InvariantViolation(f"noise amplitude must be >= 0, got {noise}")
    templates = _class_templates()
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, 1, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    for i in range(n):
        img = templates[labels[i]] + rng.uniform(-noise, noise, (IMAGE_SIDE, IMAGE_SIDE))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels)


# --- layers -------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, H*W) patches for a same-padded stride-1 conv."""
    pad = k // 2
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w]
    return cols.reshape(b, c * k * k, h * w)


def _col2im(dcols: np.ndarray, xshape: tuple, k: int) -> np.ndarray:
    pad = k // 2
    b, c, h, w = xshape
    d6 = dcols.reshape(b, c, k, k, h, w)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy : dy + h, dx : dx + w] += d6[:, :, dy, dx]
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


class _Conv:
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, dtype) -> None:
        if k < 1 or k % 2 == 0:
            raise InvariantViolation(f"conv kernel must be odd and >= 1, got {k}")
        bound = math.sqrt(6.0 / (in_ch * k * k))
        self.weight = rng.uniform(-bound, bound, (out_ch, in_ch, k, k)).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.k = k

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"conv expects {self.weight.shape[1]} input channels, got {x.shape[1]}"
            )
        self._xshape = x.shape
        self._cols = _im2col(x, self.k)
        out_ch = self.weight.shape[0]
        w2 = self.weight.reshape(out_ch, -1)
        out = np.matmul(w2, self._cols) + self.bias[:, None]
        b, _, h, w = x.shape
        return out.reshape(b, out_ch, h, w)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, out_ch, h, w = dout.shape
        do2 = dout.reshape(b, out_ch, h * w)
        w2 = self.weight.reshape(out_ch, -1)
        self.dweight = np.einsum("bof,bkf->ok", do2, self._cols).reshape(self.weight.shape)
        self.dbias = dout.sum(axis=(0, 2, 3))
        dcols = np.matmul(w2.T, do2)
        return _col2im(dcols, self._xshape, self.k)

    params = ("weight", "bias")


class _ReLU:
    params = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0)


class _MaxPool2:
    params = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"maxpool needs even spatial dims, got {h}x{w}")
        xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        self._windows = xr.reshape(b, c, h // 2, w // 2, 4)
        self._argmax = self._windows.argmax(axis=-1)  # first max wins on ties
        self._xshape = x.shape
        return np.take_along_axis(self._windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        b, c, h, w = self._xshape
        dwin = np.zeros_like(self._windows)
        np.put_along_axis(dwin, self._argmax[..., None], dout[..., None], axis=-1)
        return (
            dwin.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )


class _Flatten:
    params = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._xshape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout.reshape(self._xshape)


class _Linear:
    def __init__(self, in_features: int, out_features: int, rng, dtype) -> None:
        bound = math.sqrt(6.0 / in_features)
        self.weight = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weight.shape[1]:
            raise ShapeMismatch(
                f"linear expects {self.weight.shape[1]} features, got {x.shape[1]}"
            )
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.dweight = dout.T @ self._x
        self.dbias = dout.sum(axis=0)
        return dout @ self.weight

    params = ("weight", "bias")


# --- network ------------------------------------------------------------------

class MicroNet:
    """Layer stack built from a LayerSpec list; immutable schema, mutable weights."""

    def __init__(self, specs, in_shape=(1, IMAGE_SIDE, IMAGE_SIDE), seed: int = 0,
                 dtype=np.float32) -> None:
        self.specs = tuple(specs)
        self.in_shape = tuple(in_shape)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.layers = []
        self.input_shapes = []  # per-layer input shape, channels-first
        shape = self.in_shape
        for spec in self.specs:
            self.input_shapes.append(shape)
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ShapeMismatch(f"conv needs a (C,H,W) input, got {shape}")
                self.layers.append(_Conv(shape[0], spec.out_channels, spec.kernel, rng, dtype))
                shape = (spec.out_channels, shape[1], shape[2])
            elif spec.kind == "relu":
                self.layers.append(_ReLU())
            elif spec.kind == "maxpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeMismatch(f"maxpool needs even (C,H,W) input, got {shape}")
                self.layers.append(_MaxPool2())
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif spec.kind == "flatten":
                if len(shape) != 3:
                    raise ShapeMismatch(f"flatten needs a (C,H,W) input, got {shape}")
                self.layers.append(_Flatten())
                shape = (shape[0] * shape[1] * shape[2],)
            elif spec.kind == "linear":
                if len(shape) != 1:
                    raise ShapeMismatch(f"linear needs a flat input, got {shape}")
                self.layers.append(_Linear(shape[0], spec.out_features, rng, dtype))
                shape = (spec.out_features,)
            else:
                raise InvariantViolation(f"unknown layer kind {spec.kind!r}")
        self.out_shape = shape
        self.capture_points = frozenset(range(len(self.conv_positions())))

    def conv_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind == "conv"]

    def conv_channels(self) -> dict[int, int]:
        return {ci: self.specs[pos].out_channels
                for ci, pos in enumerate(self.conv_positions())}

    def parameters(self):
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def num_params(self) -> int:
        return sum(getattr(layer, name).size for layer, name in self.parameters())

    def copy(self) -> "MicroNet":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "MicroNet":
        other = MicroNet(self.specs, self.in_shape, seed=0, dtype=dtype)
        for (dl, dn), (sl, sn) in zip(other.parameters(), self.parameters()):
            getattr(dl, dn)[...] = getattr(sl, sn).astype(dtype)
        other.capture_points = self.capture_points
        return other

    def _forward(self, x: np.ndarray, capture_mode: str | None = None):
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeMismatch(f"expected input (B,{self.in_shape}), got {x.shape}")
        captures = {} if capture_mode else None
        conv_index = -1
        out = x
        for pos, layer in enumerate(self.layers):
            out = layer.forward(out)
            if capture_mode is None:
                continue
            if self.specs[pos].kind == "conv":
                conv_index += 1
                if conv_index in self.capture_points and capture_mode == "pre":
                    captures[conv_index] = out.copy()
            elif self.specs[pos].kind == "relu" and capture_mode == "post":
                if conv_index in self.capture_points and conv_index not in captures:
                    captures[conv_index] = out.copy()
        return out, captures

    def _backward(self, dlogits: np.ndarray) -> np.ndarray:
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def forward(net: MicroNet, images: np.ndarray, capture: bool = False,
            capture_mode: str = "pre"):
    """Run the net; with ``capture`` also return {conv_index: FeatureMapBatch}.

    Capture defaults to conv outputs before the nonlinearity; ``post``
    captures after the following relu instead.
    """
    if capture_mode not in ("pre", "post"):
        raise InvariantViolation(f"capture_mode must be 'pre' or 'post', got {capture_mode!r}")
    logits, captures = net._forward(images, capture_mode=capture_mode if capture else None)
    if not capture:
        return logits
    batches = {
        ci: FeatureMapBatch(layer_index=ci, data=arr.astype(np.float32))
        for ci, arr in captures.items()
    }
    return logits, batches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None


def train(net: MicroNet, data: Dataset, cfg: TrainConfig,
          test_data: Dataset | None = None):
    """SGD with momentum and weight decay; returns (trained copy, loss curve)."""
    cfg.validate()
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(getattr(layer, name)) for layer, name in net.parameters()]
    n = len(data.labels)
    lr = cfg.learning_rate
    curve = []
    for epoch in range(cfg.epochs):
        if epoch in cfg.decay_epochs:
            lr *= cfg.lr_decay_factor
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = data.images[idx].astype(net.dtype)
            logits, _ = net._forward(x)
            loss, dlogits = softmax_cross_entropy(logits, data.labels[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            net._backward(dlogits)
            for vel, (layer, name) in zip(velocity, net.parameters()):
                p = getattr(layer, name)
                g = getattr(layer, "d" + name) + cfg.weight_decay * p
                vel *= cfg.momentum
                vel += g
                p -= lr * vel
            loss_sum += loss * len(idx)
        stats = EpochStats(
            epoch=epoch,
            loss=loss_sum / n,
            train_acc=evaluate(net, data),
            test_acc=evaluate(net, test_data) if test_data is not None else None,
        )
        curve.append(stats)
    return net, curve


def write_curve(curve, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_acc", "test_acc"])
            for row in curve:
                writer.writerow([
                    row.epoch, repr(row.loss), repr(row.train_acc),
                    "" if row.test_acc is None else repr(row.test_acc),
                ])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def evaluate(net: MicroNet, data: Dataset, batch_size: int = 128) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    correct = 0
    for start in range(0, len(data.labels), batch_size):
        x = data.images[start : start + batch_size].astype(net.dtype)
        logits, _ = net._forward(x)
        preds = logits.argmax(axis=1)
        correct += int((preds == data.labels[start : start + batch_size]).sum())
    return correct / len(data.labels)


# --- channel surgery ----------------------------------------------------------

def apply_plan(net: MicroNet, plan: ModelPlan) -> MicroNet:
    """Drop pruned output channels and rewire downstream input slices.

    Surviving weights are copied bit-identically; the first conv's input
    channels and everything after the first linear layer are untouched.
    """
    plan.validate()
    conv_pos = net.conv_positions()
    plan_map = {lp.layer_index: lp for lp in plan.layers}
    if set(plan_map) != set(range(len(conv_pos))):
        raise PlanMismatch(
            f"plan covers layers {sorted(plan_map)}, net has conv layers "
            f"{list(range(len(conv_pos)))}"
        )
    for ci, pos in enumerate(conv_pos):
        if plan_map[ci].channels != net.specs[pos].out_channels:
            raise PlanMismatch(
                f"layer {ci}: plan has {plan_map[ci].channels} channels, "
                f"net has {net.specs[pos].out_channels}"
            )
        if not plan_map[ci].saved:
            raise EmptySavedSet(f"layer {ci} saves no channels")

    new_specs = []
    conv_index = -1
    for spec in net.specs:
        if spec.kind == "conv":
            conv_index += 1
            new_specs.append(conv(len(plan_map[conv_index].saved), spec.kernel))
        else:
            new_specs.append(spec)
    pruned_net = MicroNet(new_specs, net.in_shape, seed=0, dtype=net.dtype)

    pending: tuple[int, ...] | None = None  # saved out-channels awaiting consumption
    conv_index = -1
    for pos, spec in enumerate(net.specs):
        old = net.layers[pos]
        new = pruned_net.layers[pos]
        if spec.kind == "conv":
            conv_index += 1
            saved = list(plan_map[conv_index].saved)
            w = old.weight[saved]
            if pending is not None:
                w = w[:, list(pending)]
            new.weight[...] = w
            new.bias[...] = old.bias[saved]
            pending = plan_map[conv_index].saved
        elif spec.kind == "linear":
            w = old.weight
            if pending is not None:
                if pos == 0 or net.specs[pos - 1].kind != "flatten":
                    raise PlanMismatch("linear consuming conv output must follow flatten")
                c, h, w_sp = net.input_shapes[pos - 1]
                w = w.reshape(w.shape[0], c, h, w_sp)[:, list(pending)]
                w = w.reshape(w.shape[0], -1)
                pending = None
            new.weight[...] = w
            new.bias[...] = old.bias
    return pruned_net


# --- adversarial attacks --------------------------------------------------------

def _input_gradient(net: MicroNet, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits, _ = net._forward(images.astype(net.dtype))
    _, dlogits = softmax_cross_entropy(logits, labels)
    return net._backward(dlogits)


def fgsm(net: MicroNet, images: np.ndarray, labels: np.ndarray,
         epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    if epsilon < 0:
        raise InvariantViolation(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return images.copy()
    grad = _input_gradient(net, images, labels)
    adv = images + epsilon * np.sign(grad, dtype=images.dtype)
    return np.clip(adv, 0.0, 1.0)


def pgd(net: MicroNet, images: np.ndarray, labels: np.ndarray, epsilon: float,
        steps: int = 10, step_size: float | None = None) -> np.ndarray:
    """Iterated FGSM projected onto the epsilon ball and [0, 1]; no random start."""
    if epsilon < 0:
        raise InvariantViolation(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return images.copy()
    if step_size is None:
        step_size = epsilon / 4.0
    lo = np.clip(images - epsilon, 0.0, 1.0)
    hi = np.clip(images + epsilon, 0.0, 1.0)
    adv = images.copy()
    for _ in range(steps):
        grad = _input_gradient(net, adv, labels)
        adv = adv + step_size * np.sign(grad, dtype=images.dtype)
        adv = np.clip(adv, lo, hi)
    return adv


# --- weight store ---------------------------------------------------------------

_ARCH_FILE = "arch.json"


def _spec_to_dict(spec: LayerSpec) -> dict:
    d = {"kind": spec.kind}
    if spec.kind == "conv":
        d.update(out_channels=spec.out_channels, kernel=spec.kernel)
    elif spec.kind == "linear":
        d.update(out_features=spec.out_features)
    return d


def _spec_from_dict(d: dict) -> LayerSpec:
    kind = d["kind"]
    if kind == "conv":
        return conv(int(d["out_channels"]), int(d["kernel"]))
    if kind == "linear":
        return linear(int(d["out_features"]))
    if kind in ("relu", "maxpool", "flatten"):
        return LayerSpec(kind=kind)
    raise DataError(f"unknown layer kind {kind!r} in arch document")


def save_weights(net: MicroNet, dir_path) -> None:
    """Write arch.json plus one tensor container per parameter."""
    out = Path(dir_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        arch = {
            "version": 1,
            "input_shape": list(net.in_shape),
            "layers": [_spec_to_dict(s) for s in net.specs],
        }
        (out / _ARCH_FILE).write_text(json.dumps(arch, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write weight store {out}: {exc}") from exc
    for pos, name, arr in _param_tensors(net):
        batch = FeatureMapBatch(layer_index=pos, data=arr.astype(np.float32))
        save_feature_dump(batch, out / name)


def _param_tensors(net: MicroNet):
    """Yield (spec position, file name, 4D array) for every parameter."""
    conv_i = linear_i = 0
    for pos, spec in enumerate(net.specs):
        layer = net.layers[pos]
        if spec.kind == "conv":
            yield pos, f"conv{conv_i}_weight.cfd", layer.weight
            yield pos, f"conv{conv_i}_bias.cfd", layer.bias.reshape(-1, 1, 1, 1)
            conv_i += 1
        elif spec.kind == "linear":
            w = layer.weight
            yield pos, f"linear{linear_i}_weight.cfd", w.reshape(*w.shape, 1, 1)
            yield pos, f"linear{linear_i}_bias.cfd", layer.bias.reshape(-1, 1, 1, 1)
            linear_i += 1


def load_weights(dir_path) -> MicroNet:
    """Rebuild a MicroNet from a weight-store directory."""
    root = Path(dir_path)
    try:
        arch = json.loads((root / _ARCH_FILE).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {root / _ARCH_FILE}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{root / _ARCH_FILE} is not valid JSON: {exc}") from exc
    try:
        specs = [_spec_from_dict(d) for d in arch["layers"]]
        in_shape = tuple(int(v) for v in arch["input_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{root / _ARCH_FILE}: missing or mistyped field: {exc}") from exc
    net = MicroNet(specs, in_shape=in_shape, seed=0)
    for pos, name, arr in _param_tensors(net):
        loaded = load_feature_dump(root / name)
        if loaded.data.shape != arr.shape:
            raise ShapeMismatch(
                f"{name}: stored shape {loaded.data.shape}, schema needs {arr.shape}"
            )
        arr[...] = loaded.data
    return net
