"""Frequency-domain channel saliency and structured pruning toolkit."""

from .frequency import (
    BlockPartition,
    FrequencyConfig,
    GaussianKernel,
    GaussianSmoothing,
    build_gaussian_kernel,
    dct2_block,
    partition,
    smooth,
    to_frequency,
)
from .micronet import (
    Dataset,
    LayerSpec,
    MicroNet,
    TrainConfig,
    apply_plan,
    evaluate,
    fgsm,
    forward,
    gen_dataset,
    load_weights,
    pgd,
    save_weights,
    train,
)
from .planner import (
    LayerPlan,
    ModelPlan,
    PlanConfig,
    PruneSpec,
    make_layer_plan,
    make_model_plan,
    make_random_plan,
    parse_plan,
    rank_channels,
    serialize_plan,
)
from .saliency import (
    ChannelScore,
    LayerScores,
    ScoreConfig,
    batch_scores,
    channel_score,
    freq_distribution,
    l_fq,
    l_sp,
    spectral_energy,
)
from .tensors import (
    FeatureMapBatch,
    channel_slice,
    load_feature_dump,
    save_feature_dump,
)

__version__ = "0.1.0"
