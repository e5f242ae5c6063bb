"""Fairness-aware preference optimisation for multi-label heads over fixed features."""

from .data import (Dataset, LabelPartition, SplitSpec, SyntheticConfig, generate_synthetic,
                   load_dataset, partition_by_frequency, split_dataset)
from .grpo import GroupWeights, TrainConfig, TrainTrace, mirror_ascent_update, scale_loss, train
from .losses import LossConfig
from .metrics import MetricsReport, average_precision, evaluate
from .model import ModelParams, ReferenceParams, forward, init_params, snapshot_reference

__version__ = "0.1.0"
