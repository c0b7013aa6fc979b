"""Load-driven choice of how many layers each request runs as DSLA."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..config import from_mapping, load_flat
from ..errors import ConfigError
from .trace import BUCKET_EDGES, TraceRequest, bucket_index

# maximum conversion rate per prompt-length bucket
BUCKET_RATES = (0.125, 0.25, 0.375, 0.5)


@dataclass(frozen=True)
class ControllerConfig:
    """Conversion policy.

    ``quality_rates``/``quality_scores`` sample a monotone map from conversion
    rate to a quality score (linear in between); rates whose score falls
    below ``quality_floor`` are never used.
    """

    enabled: bool = True
    bucket_edges: tuple[int, ...] = BUCKET_EDGES
    bucket_rates: tuple[float, ...] = BUCKET_RATES
    high_watermark: float = 0.85
    low_watermark: float = 0.65
    hysteresis_ticks: int = 1
    quality_rates: tuple[float, ...] = (0.0, 0.5, 1.0)
    quality_scores: tuple[float, ...] = (1.0, 0.9, 0.6)
    quality_floor: float = 0.8

    def __post_init__(self):
        r = np.asarray(self.bucket_rates, dtype=float)
        if len(r) != len(self.bucket_edges) + 1:
            raise ConfigError("need one more bucket rate than bucket edges")
        if np.any((r < 0) | (r > 1)) or np.any(np.diff(r) < 0):
            raise ConfigError("bucket rates must lie in [0, 1] and not decrease with length")
        if np.any(np.diff(self.bucket_edges) <= 0):
            raise ConfigError("bucket edges must increase")
        if not 0 <= self.low_watermark < self.high_watermark <= 1:
            raise ConfigError("watermarks need 0 <= low < high <= 1")
        if self.hysteresis_ticks < 1:
            raise ConfigError("hysteresis window must be at least one tick")
        qr, qs = np.asarray(self.quality_rates, float), np.asarray(self.quality_scores, float)
        if qr.shape != qs.shape or qr.size < 1 or np.any(np.diff(qr) <= 0):
            raise ConfigError("quality curve needs matching, strictly increasing rates")
        if np.any(np.diff(qs) > 0):
            raise ConfigError("quality scores must not increase with conversion rate")

    def rate_cap(self, prompt_tokens: int) -> float:
        return float(self.bucket_rates[int(bucket_index(prompt_tokens, self.bucket_edges))])

    def quality(self, rate: float) -> float:
        return float(np.interp(rate, self.quality_rates, self.quality_scores))

    def layer_cap(self, prompt_tokens: int, n: int) -> int:
        """Most layers this request may convert: bucket cap, then quality floor."""
        if not self.enabled:
            return 0
        k = math.floor(self.rate_cap(prompt_tokens) * n + 1e-9)
        while k > 0 and self.quality(k / n) < self.quality_floor:
            k -= 1
        return k


def load_controller_config(path) -> ControllerConfig:
    return from_mapping(ControllerConfig, load_flat(path), strict=False)


@dataclass(frozen=True)
class LoadSnapshot:
    """What the controller sees when a request is admitted.

    ``used_bytes`` excludes the request being decided; ``teacher_layer_bytes``
    and ``dsla_layer_bytes`` are that request's footprint per softmax layer
    (KV for prompt plus output) and per DSLA layer (two states).
    """

    used_bytes: int
    capacity_bytes: int
    level: int  # conversions assigned by the previous decision
    n: int
    order: tuple
    teacher_layer_bytes: int
    dsla_layer_bytes: int

    @property
    def fraction(self) -> float:
        return self.used_bytes / self.capacity_bytes

    def footprint(self, k: int) -> int:
        return (self.n - k) * self.teacher_layer_bytes + k * self.dsla_layer_bytes

    def fraction_with(self, k: int) -> float:
        return (self.used_bytes + self.footprint(k)) / self.capacity_bytes


def controller_decide(state: LoadSnapshot, req: TraceRequest, cfg: ControllerConfig) -> tuple:
    """Layers (a prefix of the conversion order) the request converts.

    Starts from the previous decision clipped to this request's cap.  If
    admitting the request would push memory past the high watermark, adds
    layers in order until usage drops to the low watermark or the cap is
    reached.  Below the high watermark nothing grows, so under light load the
    previous decision carries over unchanged.
    """
    cap = cfg.layer_cap(req.prompt_tokens, state.n)
    k = min(state.level, cap)
    if state.fraction_with(k) > cfg.high_watermark:
        while k < cap and state.fraction_with(k) > cfg.low_watermark:
            k += 1
    return tuple(state.order[:k])


@dataclass
class ActiveConversion:
    """Per-request bookkeeping the relief pass needs."""

    request_id: int
    context: int  # tokens currently held
    k: int
    cap: int


def relief_plan(
    active: Sequence[ActiveConversion],
    used_bytes: int,
    target_bytes: float,
    layer_bytes,
) -> list[tuple[int, int]]:
    """Extra conversions of running requests to bring usage down to ``target_bytes``.

    Longest contexts go first, one layer at a time each, up to every
    request's own cap.  ``layer_bytes(request_id)`` gives the bytes freed by
    converting one more of that request's layers.  Returns
    ``(request_id, new_k)`` pairs; the plan may fall short of the target.
    """
    plan = []
    for a in sorted(active, key=lambda a: (-a.context, a.request_id)):
        if used_bytes <= target_bytes:
            break
        k = a.k
        while k < a.cap and used_bytes > target_bytes:
            used_bytes -= layer_bytes(a.request_id)
            k += 1
        if k > a.k:
            plan.append((a.request_id, k))
    return plan
