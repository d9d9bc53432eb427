import math

import numpy as np
import pytest

from freqprune import micronet, pipeline
from freqprune.planner import PruneSpec
from freqprune.saliency import ScoreConfig


def dct2_kernel(h: int, w: int) -> np.ndarray:
    """Full (u, v, x, y) cosine kernel of the defining quadruple sum.

    Built straight from the formula, independent of the separable
    rows-then-columns path under test.
    """
    u = np.arange(h, dtype=np.float64)
    v = np.arange(w, dtype=np.float64)
    x = np.arange(h, dtype=np.float64)
    y = np.arange(w, dtype=np.float64)
    au = np.where(u == 0, math.sqrt(1.0 / h), math.sqrt(2.0 / h))
    av = np.where(v == 0, math.sqrt(1.0 / w), math.sqrt(2.0 / w))
    return (
        au[:, None, None, None]
        * av[None, :, None, None]
        * np.cos(np.pi * u[:, None, None, None] * (2.0 * x[None, None, :, None] + 1.0) / (2 * h))
        * np.cos(np.pi * v[None, :, None, None] * (2.0 * y[None, None, None, :] + 1.0) / (2 * w))
    )


def dct2_naive(block: np.ndarray) -> np.ndarray:
    """Quadruple-sum DCT-II oracle: contract the full kernel against the block."""
    h, w = block.shape
    return np.einsum("uvxy,xy->uv", dct2_kernel(h, w), block.astype(np.float64))


def conv_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Sliding-window conv oracle: explicit loops over channels and offsets."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c_out, h, w), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for i in range(c_in):
                for dy in range(k):
                    for dx in range(k):
                        out[b, o] += weight[o, i, dy, dx] * xp[b, i, dy : dy + h, dx : dx + w]
            out[b, o] += bias[o]
    return out


@pytest.fixture(scope="session")
def seed7_run():
    """One trained pipeline (seed 7, 30 epochs) shared across test modules."""
    net, train_data, test_data, curve = pipeline.train_baseline(7, 30)
    plan = pipeline.saliency_plan(net, train_data.images, PruneSpec(ratio=0.5), ScoreConfig())
    return {
        "seed": 7,
        "net": net,
        "train_data": train_data,
        "test_data": test_data,
        "curve": curve,
        "plan": plan,
        "clean_test_acc": micronet.evaluate(net, test_data),
    }
