"""Dual-state linear attention (DSLA) at desk scale.

Subpackages: :mod:`dsla.distill` (losses, gradients, optimiser, chained
fine-tuning on toy stacks) and :mod:`dsla.serve` (trace generation, memory
and latency models, conversion controller, serving simulator).
"""
from .attention import (
    DualState,
    GateProjection,
    LayerKind,
    LayerParams,
    attention_profiles,
    attention_scores_parallel,
    compute_gate,
    dsla_output,
    dsla_step,
    forward_sequence,
    gla_output,
    gla_step,
    layer_forward,
    random_layer,
    teacher_forward,
)
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .sensitivity import attention_entropy, rank_layers, sensitivity_report

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "DualState",
    "GateProjection",
    "LayerKind",
    "LayerParams",
    "NumericError",
    "ShapeError",
    "attention_entropy",
    "attention_profiles",
    "attention_scores_parallel",
    "compute_gate",
    "dsla_output",
    "dsla_step",
    "forward_sequence",
    "gla_output",
    "gla_step",
    "layer_forward",
    "random_layer",
    "rank_layers",
    "sensitivity_report",
    "teacher_forward",
]
