"""Foveated vision transformer: pooled peripheral views, attention-guided
fixations, an early-exit cascade, and embedding-space attacks."""

from .estimators import FixationCascade, FoveatedViTClassifier, UnfoveatedViTClassifier
from .episode import (
    CostLedger,
    EpisodeConfig,
    TrainSchedule,
    compute_confidence_threshold,
    ensemble_evaluate,
    run_episode,
    run_episodes,
    train,
)
from .geometry import FoveaLayout, active_regions, build_canonical_layout, pool_features
from .vit import ModelConfig, VisionTransformer, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "CostLedger",
    "EpisodeConfig",
    "FixationCascade",
    "FoveaLayout",
    "FoveatedViTClassifier",
    "ModelConfig",
    "TrainSchedule",
    "UnfoveatedViTClassifier",
    "VisionTransformer",
    "active_regions",
    "build_canonical_layout",
    "compute_confidence_threshold",
    "ensemble_evaluate",
    "load_model",
    "pool_features",
    "run_episode",
    "run_episodes",
    "save_model",
    "train",
]
