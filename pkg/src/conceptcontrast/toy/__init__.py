"""Desk-scale two-stage training on synthetic multi-domain data."""

from .data import DGData, SyntheticDGConfig, generate_synthetic_dg
from .model import ToyModel, backward, cross_entropy, forward
from .train import (
    ModelConfig,
    TrainLog,
    TrainSchedule,
    compare_arms,
    finetune_coco,
    pretrain_erm,
    run_toy,
)

__all__ = [
    "DGData", "SyntheticDGConfig", "generate_synthetic_dg", "ToyModel", "backward",
    "cross_entropy", "forward", "ModelConfig", "TrainLog", "TrainSchedule",
    "compare_arms", "finetune_coco", "pretrain_erm", "run_toy",
]
