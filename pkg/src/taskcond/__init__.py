"""Continual learning with per-task expert networks.

Each task trains one expert that jointly learns a classifier and a
kernel-based task likelihood over multi-view augmented inputs.  Experts
freeze after training, so earlier tasks cannot be forgotten; at test
time the pool infers the task from the likelihoods alone, detects task
changes in block streams, and can replay stored exemplars to widen the
gating margin between experts.
"""

from .data import (
    DataFormatError,
    StreamBlock,
    Task,
    TaskSequence,
    block_stream,
    train_block_stream,
    load_cifar_batches,
    load_idx_images,
    load_idx_labels,
    load_mnist,
    load_split_digits,
    make_synthetic_tasks,
    split_synthetic,
    split_tasks,
    subsample_tasks,
)
from .detect import (
    DetectionMetrics,
    DetectionRecord,
    DetectorConfig,
    Threshold,
    calibrate,
    detection_metrics,
    frequency_test,
    stream_protocol,
    tlf,
    write_metrics_json,
    write_trace_csv,
)
from .estimator import TaskConditionalClassifier, fit_task_sequence
from .multiview import (
    FeatureStats,
    ViewSet,
    ViewSpec,
    apply_view,
    augment_batch,
    default_view_set,
    fit_feature_stats,
    identity_view_set,
)
from .network import (
    DivergenceError,
    ExpertNetwork,
    TrainConfig,
    TrainingReport,
    init_expert,
    joint_loss,
    potential,
    task_likelihood,
    train_epochs,
)
from .pool import ExpertPool, Prediction, ReplayConfig

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "DetectionMetrics",
    "DetectionRecord",
    "DetectorConfig",
    "DivergenceError",
    "ExpertNetwork",
    "ExpertPool",
    "FeatureStats",
    "Prediction",
    "ReplayConfig",
    "StreamBlock",
    "Task",
    "TaskConditionalClassifier",
    "TaskSequence",
    "Threshold",
    "TrainConfig",
    "TrainingReport",
    "ViewSet",
    "ViewSpec",
    "apply_view",
    "augment_batch",
    "block_stream",
    "train_block_stream",
    "calibrate",
    "default_view_set",
    "detection_metrics",
    "fit_feature_stats",
    "fit_task_sequence",
    "frequency_test",
    "identity_view_set",
    "init_expert",
    "joint_loss",
    "load_cifar_batches",
    "load_idx_images",
    "load_idx_labels",
    "load_mnist",
    "load_split_digits",
    "make_synthetic_tasks",
    "potential",
    "split_synthetic",
    "split_tasks",
    "stream_protocol",
    "subsample_tasks",
    "task_likelihood",
    "tlf",
    "train_epochs",
    "write_metrics_json",
    "write_trace_csv",
]
