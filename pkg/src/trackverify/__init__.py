"""Per-frame reliability verification for point-track candidates.

A small synthetic world renders dense feature grids with known ground-truth
tracks; perturbed copies of those tracks stand in for teacher predictions.
The verifier scores every candidate per frame, and selectors fuse the
candidates into pseudo-labels that are compared against the oracle and
non-learning baselines with standard point-tracking metrics.
"""

from .config import ConfigBundle, ConfigError, resolve_configs
from .features import FeatureExtractor, ModelConfig, bilinear_sample, build_descriptors
from .metrics import (
    THRESHOLDS,
    EvalReport,
    average_jaccard,
    delta_metrics,
    evaluate_tracks,
    occlusion_accuracy,
)
from .perturb import PERTURB_TYPES, PerturbationConfig, generate_candidates, perturb_track
from .selection import (
    PseudoLabel,
    agreement_select,
    fuse_pseudo_label,
    geometric_median_fuse,
    kalman_cv_select,
    min_acceleration_select,
    oracle_select,
    random_teacher_select,
    sample_queries,
    weiszfeld,
)
from .training import (
    TrainingConfig,
    TrainingDiverged,
    gradient_check,
    load_checkpoint,
    make_verifier,
    save_checkpoint,
    target_distribution,
    train,
    verifier_gradient_check,
    verifier_loss,
)
from .trajectory import (
    CandidateSet,
    QueryPoint,
    ReliabilityScores,
    Trajectory,
    displacements,
    euclidean_errors,
)
from .transformer import CandidateTransformer, Verifier, verify
from .world import (
    FeatureProvider,
    SyntheticVideo,
    VideoFeatureProvider,
    WorldConfig,
    generate_video,
    ground_truth_tracks,
    queried_first_tracks,
    read_dataset,
    render_features,
    write_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "CandidateTransformer",
    "ConfigBundle",
    "ConfigError",
    "EvalReport",
    "FeatureExtractor",
    "FeatureProvider",
    "ModelConfig",
    "PERTURB_TYPES",
    "PerturbationConfig",
    "PseudoLabel",
    "QueryPoint",
    "ReliabilityScores",
    "SyntheticVideo",
    "THRESHOLDS",
    "Trajectory",
    "TrainingConfig",
    "TrainingDiverged",
    "Verifier",
    "VideoFeatureProvider",
    "WorldConfig",
    "agreement_select",
    "average_jaccard",
    "bilinear_sample",
    "build_descriptors",
    "delta_metrics",
    "displacements",
    "euclidean_errors",
    "evaluate_tracks",
    "fuse_pseudo_label",
    "generate_candidates",
    "generate_video",
    "geometric_median_fuse",
    "gradient_check",
    "ground_truth_tracks",
    "kalman_cv_select",
    "load_checkpoint",
    "make_verifier",
    "min_acceleration_select",
    "occlusion_accuracy",
    "oracle_select",
    "perturb_track",
    "queried_first_tracks",
    "random_teacher_select",
    "read_dataset",
    "render_features",
    "resolve_configs",
    "sample_queries",
    "save_checkpoint",
    "target_distribution",
    "train",
    "verifier_gradient_check",
    "verifier_loss",
    "verify",
    "weiszfeld",
    "write_dataset",
]
