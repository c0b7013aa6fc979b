"""Session-based request traces: generation, bucket statistics and JSON-lines I/O."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ..errors import ConfigError

TRACE_FIELDS = ("arrival_time", "session_id", "turn_index", "prompt_tokens", "output_tokens")

# prompt-length buckets of the replayed production trace: upper edges and shares
BUCKET_EDGES = (2048, 4096, 8192)
BUCKET_SHARES = (0.6468, 0.1616, 0.1603, 0.031)
SHARE_TOL = 1e-3


@dataclass(frozen=True)
class TraceRequest:
    arrival_time: float  # seconds
    session_id: int
    turn_index: int
    prompt_tokens: int  # includes the session history
    output_tokens: int


@dataclass(frozen=True)
class TraceConfig:
    """Knobs of the synthetic multi-turn workload.

    Sessions start as a Poisson process; each has ``Poisson(turns_mean)``
    turns clamped to at least one.  Every request's total prompt length is
    drawn from the bucket mix (log-uniform inside a bucket), so the mix holds
    for the concatenated-history lengths that the server actually sees.
    """

    sessions: int = 1000
    session_rate: float = 1.0  # sessions per second
    turns_mean: float = 3.0
    think_time_mean: float = 30.0  # seconds between turns of a session
    bucket_edges: tuple[int, ...] = BUCKET_EDGES
    bucket_shares: tuple[float, ...] = BUCKET_SHARES
    min_prompt: int = 16
    max_prompt: int = 16384
    output_median: float = 128.0
    output_sigma: float = 0.8
    output_min: int = 8
    output_max: int = 1024
    max_requests: Optional[int] = None

    def __post_init__(self):
        shares = np.asarray(self.bucket_shares, dtype=float)
        if len(shares) != len(self.bucket_edges) + 1:
            raise ConfigError("need one more bucket share than bucket edges")
        # published shares are rounded and sum to 0.9997; renormalised when sampling
        if np.any(shares < 0) or abs(shares.sum() - 1.0) > SHARE_TOL:
            raise ConfigError(f"bucket shares must be non-negative and sum to 1, got {shares.sum():.6f}")
        edges = (self.min_prompt, *self.bucket_edges, self.max_prompt)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("bucket edges must increase strictly between min_prompt and max_prompt")
        if self.sessions < 0 or self.session_rate <= 0 or self.turns_mean < 0:
            raise ConfigError("sessions >= 0, session_rate > 0 and turns_mean >= 0 are required")
        if not 1 <= self.output_min <= self.output_max:
            raise ConfigError("need 1 <= output_min <= output_max")


def bucket_index(prompt_tokens, edges: Sequence[int] = BUCKET_EDGES):
    """Bucket of each prompt length; bucket ``i`` covers ``[edges[i-1], edges[i])``."""
    return np.searchsorted(np.asarray(edges), prompt_tokens, side="right")


def bucket_shares(trace: Sequence[TraceRequest], edges: Sequence[int] = BUCKET_EDGES) -> np.ndarray:
    lengths = np.array([r.prompt_tokens for r in trace])
    counts = np.bincount(bucket_index(lengths, edges), minlength=len(edges) + 1)
    return counts / max(len(lengths), 1)


def session_turn_counts(trace: Sequence[TraceRequest]) -> np.ndarray:
    counts: dict[int, int] = {}
    for r in trace:
        counts[r.session_id] = counts.get(r.session_id, 0) + 1
    return np.array([counts[s] for s in sorted(counts)])


def _sample_lengths(rng: np.random.Generator, cfg: TraceConfig, size: int) -> np.ndarray:
    edges = np.array((cfg.min_prompt, *cfg.bucket_edges, cfg.max_prompt), dtype=float)
    p = np.asarray(cfg.bucket_shares, dtype=float)
    b = rng.choice(len(p), size=size, p=p / p.sum())
    lo, hi = np.log(edges[b]), np.log(edges[b + 1])
    L = np.floor(np.exp(lo + (hi - lo) * rng.random(size))).astype(np.int64)
    return np.clip(L, edges[b].astype(np.int64), edges[b + 1].astype(np.int64) - 1)


def generate_trace(cfg: TraceConfig, seed: int) -> list[TraceRequest]:
    """Deterministic multi-turn trace ordered by arrival time.

    Turn ``j`` of a session carries the previous prompt, the previous answer
    and a fresh user message.  Sampled lengths are sorted within a session so
    that history only grows; a previous answer is shortened when needed so
    the fresh message keeps at least one token.
    """
    rng = np.random.default_rng(seed)
    starts = np.cumsum(rng.exponential(1.0 / cfg.session_rate, cfg.sessions))
    turns = np.maximum(rng.poisson(cfg.turns_mean, cfg.sessions), 1)
    out: list[TraceRequest] = []
    mu = math.log(cfg.output_median)
    for sid in range(cfg.sessions):
        m = int(turns[sid])
        L = np.sort(_sample_lengths(rng, cfg, m))
        outs = np.clip(np.rint(rng.lognormal(mu, cfg.output_sigma, m)), cfg.output_min, cfg.output_max).astype(int)
        gaps = rng.exponential(cfg.think_time_mean, m)
        gaps[0] = 0.0
        t = float(starts[sid])
        for j in range(m):
            if j > 0:
                L[j] = max(L[j], L[j - 1] + 2)
                outs[j - 1] = min(outs[j - 1], int(L[j] - L[j - 1] - 1))
            t += float(gaps[j])
            out.append(TraceRequest(t, sid, j, int(L[j]), int(outs[j])))
    # outputs of earlier turns may have been shortened after their request was built
    fixed = {(r.session_id, r.turn_index): r for r in out}
    final = []
    for r in out:
        nxt = fixed.get((r.session_id, r.turn_index + 1))
        o = r.output_tokens if nxt is None else min(r.output_tokens, nxt.prompt_tokens - r.prompt_tokens - 1)
        final.append(TraceRequest(r.arrival_time, r.session_id, r.turn_index, r.prompt_tokens, max(o, 1)))
    final.sort(key=lambda r: (r.arrival_time, r.session_id, r.turn_index))
    if cfg.max_requests is not None:
        final = final[: cfg.max_requests]
    return final


def trace_lines(trace: Iterable[TraceRequest]) -> str:
    return "".join(json.dumps(asdict(r), separators=(",", ":")) + "\n" for r in trace)


def write_trace(path, trace: Iterable[TraceRequest]) -> None:
    Path(path).write_text(trace_lines(trace), encoding="utf-8")


def read_trace(path) -> list[TraceRequest]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if set(rec) != set(TRACE_FIELDS):
                raise ConfigError(f"{path}:{lineno}: expected fields {TRACE_FIELDS}, got {sorted(rec)}")
            r = TraceRequest(
                float(rec["arrival_time"]),
                int(rec["session_id"]),
                int(rec["turn_index"]),
                int(rec["prompt_tokens"]),
                int(rec["output_tokens"]),
            )
            if r.prompt_tokens < 1 or r.output_tokens < 1:
                raise ConfigError(f"{path}:{lineno}: token counts must be positive")
            out.append(r)
    return out
