"""Multi-modal mutual enhancement for domain-adaptive action recognition.

A self-contained stack: float64 tensors with a reverse-mode gradient tape,
the gating/consensus/fusion model with an adversarial domain discriminator,
a deterministic two-domain synthetic dataset, and a training/evaluation CLI.
"""

from .autodiff import (
    ShapeError,
    Tape,
    Tensor,
    affine,
    concat_channels,
    conv1x1,
    downsample2x,
    finite_diff_grad,
    global_avg_pool,
    grad_close,
    grad_reverse,
    relu,
    sigmoid,
    softmax_xent,
    upsample_to,
)
from .harness import (
    MetricsReport,
    NumericError,
    TrainConfig,
    TrainResult,
    evaluate,
    evaluate_ensemble,
    train,
)
from .model import (
    FusedScores,
    M3emParams,
    ModelDims,
    Scores,
    channel_scale,
    combined_loss,
    consensus_map,
    consensus_pool,
    cross_gate,
    discriminator_forward,
    ensemble_scores,
    init_params,
    late_fuse,
    model_forward,
    pearson_map,
    self_gate,
    smr_forward,
)
from .synthdata import DomainShift, Split, SyntheticDatasetSpec, generate

__version__ = "0.1.0"

__all__ = [
    "DomainShift",
    "FusedScores",
    "M3emParams",
    "MetricsReport",
    "ModelDims",
    "NumericError",
    "Scores",
    "ShapeError",
    "Split",
    "SyntheticDatasetSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "affine",
    "channel_scale",
    "combined_loss",
    "concat_channels",
    "consensus_map",
    "consensus_pool",
    "conv1x1",
    "cross_gate",
    "discriminator_forward",
    "downsample2x",
    "ensemble_scores",
    "evaluate",
    "evaluate_ensemble",
    "finite_diff_grad",
    "generate",
    "global_avg_pool",
    "grad_close",
    "grad_reverse",
    "init_params",
    "late_fuse",
    "model_forward",
    "pearson_map",
    "relu",
    "self_gate",
    "sigmoid",
    "smr_forward",
    "softmax_xent",
    "train",
    "upsample_to",
]
