"""Trace-driven simulation of adaptive layer conversion in a serving system."""
from .calibration import bundled_trace, load_calibration
from .controller import ControllerConfig, LoadSnapshot, controller_decide, relief_plan
from .cost import CostModel, Phase, batch_cost, dsla_state_bytes, kv_cache_bytes, step_cost
from .scheduler import MixedBatchExecutor, SubBatch, schedule_batch, sequential_generate
from .simulator import ModelProfile, SimReport, iteration_cost, simulate
from .trace import TraceConfig, TraceRequest, generate_trace, read_trace, write_trace

__all__ = [
    "ControllerConfig",
    "CostModel",
    "LoadSnapshot",
    "MixedBatchExecutor",
    "ModelProfile",
    "Phase",
    "SimReport",
    "SubBatch",
    "TraceConfig",
    "TraceRequest",
    "batch_cost",
    "bundled_trace",
    "controller_decide",
    "dsla_state_bytes",
    "generate_trace",
    "iteration_cost",
    "kv_cache_bytes",
    "load_calibration",
    "read_trace",
    "relief_plan",
    "schedule_batch",
    "sequential_generate",
    "simulate",
    "step_cost",
    "write_trace",
]
