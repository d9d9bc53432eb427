"""Per-channel saliency scores.

For each channel's feature map the toolkit computes:

  spectral  Frobenius norm of the blockwise DCT coefficient grid
  dist      fraction of coefficients whose magnitude meets or exceeds the
            mean coefficient magnitude (the effective frequency spread)
  l_fq      spectral * dist (or spectral alone when ``use_dist`` is off)
  l_sp      Frobenius norm of the raw spatial map
  combined  l_fq + lam * l_sp, with ablation flags dropping either term

Scores for a captured batch are averaged arithmetically over images in
ascending image order, field by field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InvariantViolation
from .frequency import FrequencyConfig, to_frequency
from .tensors import FeatureMapBatch


@dataclass(frozen=True)
class ScoreConfig:
    """Metric parameters; ``lam`` weights the spatial regularizer."""

    lam: float = 0.03
    use_dist: bool = True
    use_freq: bool = True
    use_spatial: bool = True
    frequency: FrequencyConfig = field(default_factory=FrequencyConfig)

    def validate(self) -> None:
        if not np.isfinite(self.lam):
            raise InvariantViolation(f"lam must be finite, got {self.lam}")
        if not (self.use_freq or self.use_spatial):
            raise InvariantViolation("at least one of use_freq/use_spatial must be on")
        self.frequency.validate()


@dataclass(frozen=True)
class ChannelScore:
    channel: int
    spectral: float
    dist: float
    l_fq: float
    l_sp: float
    combined: float


@dataclass(frozen=True)
class LayerScores:
    """Index-aligned per-channel scores, batch-averaged over ``batch_size`` images."""

    layer_index: int
    batch_size: int
    scores: tuple[ChannelScore, ...]


def spectral_energy(freq: np.ndarray) -> float:
    """Frobenius norm of the coefficient grid."""
    f = np.asarray(freq, dtype=np.float64)
    return float(np.sqrt(np.sum(f * f)))


def freq_distribution(freq: np.ndarray) -> float:
    """Fraction of coefficients with magnitude >= the mean magnitude.

    Always in [1/(H*W), 1]: the mean is clamped to the max magnitude so
    float rounding on constant grids cannot empty the count.
    """
    a = np.abs(np.asarray(freq, dtype=np.float64))
    mu = min(float(a.mean()), float(a.max()))
    return float(np.count_nonzero(a >= mu)) / a.size


def l_fq(freq: np.ndarray, cfg: ScoreConfig) -> float:
    """Frequency saliency: spectral energy scaled by the coefficient spread."""
    spectral = spectral_energy(freq)
    if not cfg.use_dist:
        return spectral
    return spectral * freq_distribution(freq)


def l_sp(map_: np.ndarray) -> float:
    """Spatial magnitude: Frobenius norm of the raw map."""
    m = np.asarray(map_, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def channel_score(map_: np.ndarray, cfg: ScoreConfig, channel: int = 0) -> ChannelScore:
    """Score one channel's map for one image."""
    cfg.validate()
    freq = to_frequency(map_, cfg.frequency)
    spectral = spectral_energy(freq)
    dist = freq_distribution(freq)
    fq = spectral * dist if cfg.use_dist else spectral
    sp = l_sp(map_)
    if cfg.use_freq and cfg.use_spatial:
        combined = fq + cfg.lam * sp
    elif cfg.use_freq:
        combined = fq
    else:
        combined = sp
    return ChannelScore(
        channel=channel, spectral=spectral, dist=dist, l_fq=fq, l_sp=sp, combined=combined
    )


def batch_scores(batch: FeatureMapBatch, cfg: ScoreConfig) -> LayerScores:
    """Average every score field over images, in ascending image order."""
    cfg.validate()
    n_b, n_c = batch.batch_size, batch.channels
    fields = ("spectral", "dist", "l_fq", "l_sp", "combined")
    sums = np.zeros((n_c, len(fields)), dtype=np.float64)
    for b in range(n_b):
        for c in range(n_c):
            s = channel_score(batch.data[b, c], cfg, channel=c)
            sums[c] += [getattr(s, name) for name in fields]
    means = sums / n_b
    scores = tuple(
        ChannelScore(channel=c, **dict(zip(fields, means[c]))) for c in range(n_c)
    )
    return LayerScores(layer_index=batch.layer_index, batch_size=n_b, scores=scores)


def recombine(scores: LayerScores, cfg: ScoreConfig) -> LayerScores:
    """Recompute l_fq and combined from already-averaged fields.

    Valid because every variant's combined score is linear in the per-image
    spectral, l_fq, and l_sp values, so recombining their batch means equals
    scoring from scratch under ``cfg``.
    """
    cfg.validate()
    out = []
    for s in scores.scores:
        fq = s.l_fq if cfg.use_dist else s.spectral
        if cfg.use_freq and cfg.use_spatial:
            combined = fq + cfg.lam * s.l_sp
        elif cfg.use_freq:
            combined = fq
        else:
            combined = s.l_sp
        out.append(
            ChannelScore(
                channel=s.channel, spectral=s.spectral, dist=s.dist,
                l_fq=fq, l_sp=s.l_sp, combined=combined,
            )
        )
    return LayerScores(
        layer_index=scores.layer_index, batch_size=scores.batch_size, scores=tuple(out)
    )


# --- JSON score report -------------------------------------------------------

def layer_report(scores: LayerScores, cfg: ScoreConfig) -> dict:
    """Serializable per-layer score document."""
    return {
        "layer_index": scores.layer_index,
        "batch_size": scores.batch_size,
        "lambda": cfg.lam,
        "block_size": cfg.frequency.block_size,
        "scores": [
            {
                "channel": s.channel,
                "spectral": s.spectral,
                "dist": s.dist,
                "l_fq": s.l_fq,
                "l_sp": s.l_sp,
                "combined": s.combined,
            }
            for s in scores.scores
        ],
    }


def layer_from_report(doc: dict) -> LayerScores:
    """Rebuild LayerScores from a per-layer score document."""
    try:
        scores = tuple(
            ChannelScore(
                channel=int(s["channel"]),
                spectral=float(s["spectral"]),
                dist=float(s["dist"]),
                l_fq=float(s["l_fq"]),
                l_sp=float(s["l_sp"]),
                combined=float(s["combined"]),
            )
            for s in doc["scores"]
        )
        return LayerScores(
            layer_index=int(doc["layer_index"]),
            batch_size=int(doc["batch_size"]),
            scores=scores,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed score document: {exc}") from exc
