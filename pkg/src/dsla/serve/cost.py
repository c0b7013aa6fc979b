"""KV-cache memory formula and the analytical per-layer latency model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..attention import LayerKind
from ..config import dump_flat, from_mapping, load_flat, to_mapping
from ..errors import ConfigError, DomainError

BYTES_PER_ELEM = (2, 4, 8)
# beyond this the byte count no longer fits the signed 64-bit series in reports
MAX_BYTES = 2**63 - 1


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


def _positive_int(name: str, x) -> int:
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
        raise DomainError(f"{name} must be an integer, got {type(x).__name__}")
    x = int(x)
    if x < 1:
        raise DomainError(f"{name} must be positive, got {x}")
    return x


def kv_cache_bytes(n: int, b: int, s: int, h: int, d_h: int, bytes_per_elem: int) -> int:
    """Bytes of keys plus values for ``n`` softmax layers: ``2·n·b·s·h·d_h·B``.

    Computed on Python integers, so it is exact for any size; results past
    the signed 64-bit range are rejected.
    """
    args = dict(n=n, b=b, s=s, h=h, d_h=d_h, bytes_per_elem=bytes_per_elem)
    vals = [_positive_int(k, v) for k, v in args.items()]
    out = 2 * math.prod(vals)
    if out > MAX_BYTES:
        raise DomainError(f"KV cache size {out} exceeds the 64-bit byte counter")
    return out


def dsla_state_bytes(n: int, b: int, h: int, d_h: int, bytes_per_elem: int) -> int:
    """Bytes of the two ``d_h × d_h`` states per head for ``n`` DSLA layers."""
    vals = [_positive_int(k, v) for k, v in dict(n=n, b=b, h=h, d_h=d_h, B=bytes_per_elem).items()]
    return 2 * math.prod(vals) * d_h


@dataclass(frozen=True)
class CostModel:
    """Per-layer latency constants in milliseconds.

    A request alone costs ``a·f(s) + c`` per layer with ``f`` quadratic for
    softmax prefill, linear for softmax decode and DSLA prefill, and zero for
    DSLA decode.  In a batch the ``c`` part is paid once per sub-batch and
    every extra request adds ``m``, which is how batching amortises weight
    traffic.  Running a layer as two sub-batches adds ``split_overhead``.
    """

    teacher_prefill_a: float = 1.953125e-6
    teacher_prefill_c: float = 0.5
    dsla_prefill_a: float = 4.0e-3
    dsla_prefill_c: float = 0.5
    teacher_decode_a: float = 8.0e-6
    teacher_decode_c: float = 0.3
    dsla_decode_c: float = 0.3
    teacher_prefill_m: float = 0.0
    dsla_prefill_m: float = 0.0
    teacher_decode_m: float = 2.0e-3
    dsla_decode_m: float = 2.5e-3
    split_overhead: float = 0.05
    jitter_prob: float = 0.0  # chance per iteration of an allocation stall
    jitter_ms: float = 500.0

    def __post_init__(self):
        for k, v in to_mapping(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"cost constant {k} must be finite and non-negative, got {v}")
        if self.jitter_prob > 1:
            raise ConfigError("jitter_prob must be in [0, 1]")

    def constants(self, kind: LayerKind, phase: Phase) -> tuple[float, float, float]:
        """``(a, c, m)`` for one kind/phase; GLA layers are billed as DSLA."""
        t = "teacher" if LayerKind(kind) is LayerKind.TEACHER else "dsla"
        phase = Phase(phase)
        a = 0.0 if (t, phase) == ("dsla", Phase.DECODE) else getattr(self, f"{t}_{phase.value}_a")
        return a, getattr(self, f"{t}_{phase.value}_c"), getattr(self, f"{t}_{phase.value}_m")

    def prefill_crossover(self) -> float:
        """Context length where softmax and DSLA prefill cost the same."""
        aT, cT, _ = self.constants(LayerKind.TEACHER, Phase.PREFILL)
        aD, cD, _ = self.constants(LayerKind.DSLA, Phase.PREFILL)
        # aT s^2 - aD s + (cT - cD) = 0, larger root
        disc = aD * aD - 4.0 * aT * (cT - cD)
        if aT == 0 or disc < 0:
            raise DomainError("prefill costs never cross")
        return (aD + math.sqrt(disc)) / (2.0 * aT)


def _length_term(kind: LayerKind, phase: Phase, s):
    s = np.asarray(s, dtype=np.float64)
    if LayerKind(kind) is LayerKind.TEACHER:
        return s * s if Phase(phase) is Phase.PREFILL else s
    return s if Phase(phase) is Phase.PREFILL else np.zeros_like(s)


def step_cost(kind: LayerKind, phase: Phase, s: int, cost_model: CostModel) -> float:
    """Latency of one layer for a single request at context length ``s``."""
    if s < 1:
        raise DomainError(f"context length must be positive, got {s}")
    a, c, _ = cost_model.constants(kind, phase)
    return float(a * _length_term(kind, phase, s) + c)


def batch_cost(kind: LayerKind, phase: Phase, lengths, cost_model: CostModel) -> float:
    """Latency of one layer for a sub-batch; equals :func:`step_cost` for one request."""
    lengths = np.asarray(lengths)
    b = lengths.size
    if b == 0:
        return 0.0
    a, c, m = cost_model.constants(kind, phase)
    return float(c + m * (b - 1) + a * _length_term(kind, phase, lengths).sum())


def load_cost_model(path) -> CostModel:
    return from_mapping(CostModel, load_flat(path), strict=False)


def cost_model_text(cm: CostModel) -> str:
    return dump_flat(to_mapping(cm))
