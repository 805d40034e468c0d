"""Multimodal behavioral-biometrics passive authentication.

Touch-task and background-sensor streams are preprocessed into per-timestamp
feature matrices, cut into fixed windows, embedded by a two-layer LSTM
trained with triplet loss, scored against enrollment templates and fused at
score level across modalities.
"""

from ._accel import backend
from .data import (DatasetSplit, DeviceMeta, ModalityKind, RawSeries, SessionRecord, TaskKind,
                   load_dataset, split_dataset, validate_subject)
from .encoder import (EncoderConfig, EncoderModel, OptimizerConfig, TripletLossConfig, embed,
                      encoder_forward, gradient_check, init_model, load_model, save_model,
                      triplet_loss)
from .errors import BiofuseError
from .evaluation import build_score_table, compute_eer, det_curve, relative_error_reduction
from .fusion import compute_weights, enumerate_subsets, fuse_scores, rank_subsets
from .preprocessing import FeatureStore, build_features, downsample_ratio
from .synth import SynthConfig, generate_dataset, generate_sessions
from .training import TrainConfig, train_modality
from .windowing import WindowSpec, extract_enrollment_windows, extract_random_window

__version__ = "0.1.0"

__all__ = [
    "backend", "DatasetSplit", "DeviceMeta", "ModalityKind", "RawSeries", "SessionRecord", "TaskKind",
    "load_dataset", "split_dataset", "validate_subject", "EncoderConfig", "EncoderModel",
    "OptimizerConfig", "TripletLossConfig", "embed", "encoder_forward", "gradient_check", "init_model",
    "load_model", "save_model", "triplet_loss", "BiofuseError", "build_score_table", "compute_eer",
    "det_curve", "relative_error_reduction", "compute_weights", "enumerate_subsets", "fuse_scores",
    "rank_subsets", "FeatureStore", "build_features", "downsample_ratio", "SynthConfig",
    "generate_dataset", "generate_sessions", "TrainConfig", "train_modality", "WindowSpec",
    "extract_enrollment_windows", "extract_random_window",
]
