"""DDPM self-supervised pre-training and few-shot landmark detection."""

from landmark_diffusion.diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    forward_sample,
    forward_step,
    posterior_mean,
    reverse_step,
    simple_loss,
    ancestral_sample,
)
from landmark_diffusion.network import NetworkConfig, build_network, convert_to_detector
from landmark_diffusion.heatmaps import (
    LandmarkSet,
    HeatmapStack,
    encode_heatmaps,
    decode_centroid,
    rescale_landmarks,
)
from landmark_diffusion.training import (
    PretrainConfig,
    FinetuneConfig,
    PretrainResult,
    FinetuneResult,
    EmaTracker,
    PlateauController,
    pretrain,
    finetune,
    predict_landmarks,
    evaluate_mre,
    detector_from_checkpoint,
    select_snapshot,
    SnapshotSelection,
    SnapshotScore,
)

__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "forward_sample",
    "forward_step",
    "posterior_mean",
    "reverse_step",
    "simple_loss",
    "ancestral_sample",
    "NetworkConfig",
    "build_network",
    "convert_to_detector",
    "LandmarkSet",
    "HeatmapStack",
    "encode_heatmaps",
    "decode_centroid",
    "rescale_landmarks",
    "PretrainConfig",
    "FinetuneConfig",
    "PretrainResult",
    "FinetuneResult",
    "EmaTracker",
    "PlateauController",
    "pretrain",
    "finetune",
    "predict_landmarks",
    "evaluate_mre",
    "detector_from_checkpoint",
    "select_snapshot",
    "SnapshotSelection",
    "SnapshotScore",
]
