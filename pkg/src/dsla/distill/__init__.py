"""Layer-wise distillation of softmax layers into dual-state linear attention."""
from .chain import (
    FinetuneConfig,
    FinetuneResult,
    StageCheckpoint,
    chained_finetune,
    dsla_from_teacher,
    finetune_layer,
    gate_similarity,
    heldout_l_dist,
    independent_finetune,
    train_layer,
)
from .losses import LossBreakdown, backward, contrastive_loss, distill_loss, layer_loss, total_loss
from .optim import OptimizerState, Schedule, optimizer_step
from .toy import LayerBank, ToyModel, recall_dataset, toy_teacher

__all__ = [
    "FinetuneConfig",
    "FinetuneResult",
    "LayerBank",
    "LossBreakdown",
    "OptimizerState",
    "Schedule",
    "StageCheckpoint",
    "ToyModel",
    "backward",
    "chained_finetune",
    "contrastive_loss",
    "distill_loss",
    "dsla_from_teacher",
    "finetune_layer",
    "gate_similarity",
    "heldout_l_dist",
    "independent_finetune",
    "layer_loss",
    "optimizer_step",
    "recall_dataset",
    "toy_teacher",
    "total_loss",
    "train_layer",
]
