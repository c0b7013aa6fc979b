"""Iteration-level serving simulator with per-request layer conversion."""
from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..config import from_mapping, load_flat
from ..errors import ConfigError, DomainError
from .controller import ActiveConversion, ControllerConfig, LoadSnapshot, controller_decide, relief_plan
from .cost import BYTES_PER_ELEM, CostModel, dsla_state_bytes, kv_cache_bytes
from .trace import TraceRequest

GIB = 2**30


@dataclass(frozen=True)
class ModelProfile:
    """Served model shape and node limits.

    ``capacity_bytes`` is what is left for per-request state after both
    architectures' weights are resident.
    """

    n: int = 32
    h: int = 32
    d_h: int = 128
    bytes_per_elem: int = 2
    conversion_order: Optional[tuple[int, ...]] = None  # defaults to 0..n-1
    capacity_bytes: int = 30 * GIB
    max_batch: int = 64
    max_prefill_tokens: int = 16384

    def __post_init__(self):
        if min(self.n, self.h, self.d_h, self.max_batch, self.max_prefill_tokens, self.capacity_bytes) < 1:
            raise ConfigError("model profile sizes and limits must be positive")
        if self.bytes_per_elem not in BYTES_PER_ELEM:
            raise ConfigError(f"bytes_per_elem must be one of {BYTES_PER_ELEM}")
        if self.conversion_order is not None and sorted(self.conversion_order) != list(range(self.n)):
            raise ConfigError("conversion_order must be a permutation of the layers")

    @property
    def order(self) -> tuple:
        return tuple(range(self.n)) if self.conversion_order is None else tuple(self.conversion_order)

    def teacher_layer_bytes(self, tokens: int) -> int:
        return kv_cache_bytes(1, 1, tokens, self.h, self.d_h, self.bytes_per_elem)

    @property
    def dsla_layer_bytes(self) -> int:
        return dsla_state_bytes(1, 1, self.h, self.d_h, self.bytes_per_elem)

    def request_bytes(self, tokens: int, k: int) -> int:
        """Footprint of one request holding ``tokens`` with ``k`` layers converted."""
        return (self.n - k) * self.teacher_layer_bytes(tokens) + k * self.dsla_layer_bytes


def load_profile(path) -> ModelProfile:
    return from_mapping(ModelProfile, load_flat(path), strict=False)


def iteration_cost(ks, lengths, prefill: bool, n: int, cm: CostModel) -> tuple[float, np.ndarray, float]:
    """Time of one pass over all ``n`` layers, which depths ran split, and a slope.

    Request ``i`` runs the layer at position ``r`` of the conversion order as
    DSLA iff ``ks[i] > r``, so at each depth the batch splits into a softmax
    group and a DSLA group, each billed as one sub-batch.  The slope is how
    much a decode pass grows when every context grows by one token.
    """
    ks = np.asarray(ks, dtype=np.int64)
    s = np.asarray(lengths, dtype=np.float64)
    b = ks.size
    if b == 0:
        return 0.0, np.zeros(n, dtype=bool), 0.0
    order = np.argsort(ks, kind="stable")
    ks, s = ks[order], s[order]
    if prefill:
        aT, cT, mT = cm.teacher_prefill_a, cm.teacher_prefill_c, cm.teacher_prefill_m
        aD, cD, mD = cm.dsla_prefill_a, cm.dsla_prefill_c, cm.dsla_prefill_m
        fT, fD = s * s, s
    else:
        aT, cT, mT = cm.teacher_decode_a, cm.teacher_decode_c, cm.teacher_decode_m
        aD, cD, mD = 0.0, cm.dsla_decode_c, cm.dsla_decode_m
        fT, fD = s, np.zeros_like(s)
    r = np.arange(n)
    nT = np.searchsorted(ks, r, side="right")  # requests with k <= r run softmax at depth r
    nD = b - nT
    cumT = np.concatenate([[0.0], np.cumsum(fT)])
    cumD = np.concatenate([[0.0], np.cumsum(fD)])
    sumT = cumT[nT]
    sumD = cumD[-1] - cumD[nT]
    tT = np.where(nT > 0, cT + mT * (nT - 1) + aT * sumT, 0.0)
    tD = np.where(nD > 0, cD + mD * (nD - 1) + aD * sumD, 0.0)
    split = (nT > 0) & (nD > 0)
    cost = float(tT.sum() + tD.sum() + cm.split_overhead * split.sum())
    slope = 0.0 if prefill else float(aT * nT.sum())
    return cost, split, slope


def _steps_until(gap: float, c0: float, slope: float) -> int:
    """Fewest steps ``m >= 1`` with ``m·c0 + slope·m(m-1)/2 >= gap``."""
    if gap <= c0:
        return 1
    if slope == 0.0:
        m = int(np.ceil(gap / c0))
    else:
        a, b = slope / 2.0, c0 - slope / 2.0
        m = int(np.ceil((-b + np.sqrt(b * b + 4 * a * gap)) / (2 * a)))
    m = max(m, 1)
    while m > 1 and (m - 1) * c0 + slope * (m - 1) * (m - 2) / 2.0 >= gap:
        m -= 1
    while m * c0 + slope * m * (m - 1) / 2.0 < gap:
        m += 1
    return m


@dataclass
class SimReport:
    """Per-request results and per-iteration time series of one run.

    Latencies are in milliseconds per generated token, measured from arrival
    to the last token.  Timeline arrays share one index.  A record is taken
    after every iteration that admitted, finished or converted something;
    runs of plain decode iterations in between are folded into one record.
    """

    policy_enabled: bool
    normalized_latency: np.ndarray
    queue_delay_ms: np.ndarray
    conversions: np.ndarray  # layers converted per request at completion
    generated_tokens: np.ndarray
    unserved: list
    time_ms: np.ndarray
    memory_fraction: np.ndarray
    conversion_rate: np.ndarray  # mean converted share over running requests
    running: np.ndarray
    queued: np.ndarray
    split_layers: np.ndarray  # split layer passes since the previous record
    steps: np.ndarray  # scheduler iterations since the previous record
    layer_splits: np.ndarray  # per-layer count of split iterations

    def summary(self) -> dict:
        served = ~np.isnan(self.normalized_latency)
        lat = self.normalized_latency[served]
        pct = np.percentile(lat, [50, 90, 99]) if lat.size else [float("nan")] * 3
        return {
            "policy_enabled": self.policy_enabled,
            "requests": int(self.normalized_latency.size),
            "served": int(served.sum()),
            "unserved": len(self.unserved),
            "mean_normalized_latency_ms": float(lat.mean()) if lat.size else float("nan"),
            "median_normalized_latency_ms": float(pct[0]),
            "p90_normalized_latency_ms": float(pct[1]),
            "p99_normalized_latency_ms": float(pct[2]),
            "mean_queue_delay_ms": float(self.queue_delay_ms[served].mean()) if lat.size else float("nan"),
            "generated_tokens": int(self.generated_tokens.sum()),
            "converted_requests": int((self.conversions > 0).sum()),
            "mean_conversions": float(self.conversions[served].mean()) if lat.size else 0.0,
            "peak_memory_fraction": float(self.memory_fraction.max()) if self.memory_fraction.size else 0.0,
            "split_iterations": int((self.split_layers > 0).sum()),
            "makespan_ms": float(self.time_ms[-1]) if self.time_ms.size else 0.0,
            "iterations": int(self.steps.sum()),
            "timeline_points": int(self.time_ms.size),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ms", "memory_fraction", "conversion_rate", "running", "queued", "split_layers", "steps"])
        for row in zip(
            self.time_ms,
            self.memory_fraction,
            self.conversion_rate,
            self.running,
            self.queued,
            self.split_layers,
            self.steps,
        ):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), *map(int, row[3:])])
        return buf.getvalue()

    def requests_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request", "normalized_latency_ms", "queue_delay_ms", "conversions", "generated_tokens"])
        for i, row in enumerate(
            zip(self.normalized_latency, self.queue_delay_ms, self.conversions, self.generated_tokens)
        ):
            w.writerow([i, repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
        return buf.getvalue()


@dataclass
class _State:
    """Mutable per-request arrays, indexed by trace position."""

    prompt: np.ndarray
    output: np.ndarray
    k: np.ndarray = field(init=False)
    cap: np.ndarray = field(init=False)
    generated: np.ndarray = field(init=False)
    reserved: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.prompt.size
        self.k = np.zeros(n, dtype=np.int64)
        self.cap = np.zeros(n, dtype=np.int64)
        self.generated = np.zeros(n, dtype=np.int64)
        self.reserved = np.zeros(n, dtype=object)  # Python ints, exact


def simulate(
    trace: Sequence[TraceRequest],
    profile: ModelProfile,
    cfg: ControllerConfig,
    cost_model: CostModel,
    seed: int = 0,
) -> SimReport:
    """Replay ``trace`` through an iteration-level batching server.

    Each iteration prefills newly admitted requests and decodes one token for
    every running request; its duration comes from ``cost_model``.  KV memory
    for prompt plus output is reserved at admission on every softmax layer.
    The controller picks each request's conversion count at admission and,
    when memory passes the high watermark or the queue head does not fit,
    converts more layers of running requests (longest first), paying a DSLA
    prefill over their current context for each newly converted layer.
    Requests that can never fit are reported as unserved.
    """
    if len(trace) == 0:
        raise DomainError("trace is empty")
    n = profile.n
    order = profile.order
    arrivals = np.array([r.arrival_time for r in trace], dtype=np.float64) * 1e3
    if np.any(np.diff(arrivals) < 0):
        idx = np.argsort(arrivals, kind="stable")
        trace = [trace[i] for i in idx]
        arrivals = arrivals[idx]
    st = _State(
        np.array([r.prompt_tokens for r in trace], dtype=np.int64),
        np.array([r.output_tokens for r in trace], dtype=np.int64),
    )
    N = len(trace)
    admit_t = np.full(N, np.nan)
    finish_t = np.full(N, np.nan)
    rng = np.random.default_rng(seed)
    capacity = profile.capacity_bytes
    state_bytes = profile.dsla_layer_bytes
    total_tokens = st.prompt + st.output
    layer_kv = [profile.teacher_layer_bytes(int(t)) for t in total_tokens]

    def footprint(i: int, k: int) -> int:
        return (n - k) * layer_kv[i] + k * state_bytes

    t = 0.0
    nxt = 0
    queue: deque[int] = deque()
    running: list[int] = []
    used = 0
    level = 0
    over_ticks = 0
    unserved: list[int] = []
    series = {k: [] for k in ("time", "mem", "conv", "run", "queue", "split", "steps")}
    layer_splits = np.zeros(n, dtype=np.int64)
    order_idx = np.asarray(order)

    def convert(plan) -> float:
        nonlocal used, level
        extra = 0.0
        for rid, new_k in plan:
            ctx = int(st.prompt[rid] + st.generated[rid])
            add = int(new_k - st.k[rid])
            extra += add * (cost_model.dsla_prefill_a * ctx + cost_model.dsla_prefill_c)
            new_bytes = footprint(rid, new_k)
            used += new_bytes - st.reserved[rid]
            st.reserved[rid] = new_bytes
            st.k[rid] = new_k
            level = max(level, new_k)
        return extra

    def relieve(target: float) -> float:
        active = [
            ActiveConversion(i, int(st.prompt[i] + st.generated[i]), int(st.k[i]), int(st.cap[i])) for i in running
        ]
        plan = relief_plan(active, used, target, lambda rid: layer_kv[rid] - state_bytes)
        return convert(plan)

    while nxt < N or queue or running:
        if not queue and not running:
            t = max(t, arrivals[nxt])
        while nxt < N and arrivals[nxt] <= t:
            queue.append(nxt)
            nxt += 1

        extra = 0.0
        admitted: list[int] = []
        budget = profile.max_prefill_tokens
        while queue and len(running) + len(admitted) < profile.max_batch:
            i = queue[0]
            if admitted and st.prompt[i] > budget:
                break
            cap = cfg.layer_cap(int(st.prompt[i]), n)
            snap = LoadSnapshot(used, capacity, level, n, order, layer_kv[i], state_bytes)
            k = len(controller_decide(snap, trace[i], cfg))
            if used + footprint(i, k) > capacity:
                # the head does not fit: convert it fully, then relieve running requests
                k = cap
                if cfg.enabled and running:
                    extra += relieve(capacity - footprint(i, k))
                if used + footprint(i, k) > capacity:
                    if not running and not admitted:
                        unserved.append(queue.popleft())
                        continue
                    break
            queue.popleft()
            st.k[i], st.cap[i] = k, cap
            st.reserved[i] = footprint(i, k)
            used += st.reserved[i]
            level = max(level, k)
            admit_t[i] = t
            admitted.append(i)
            budget -= int(st.prompt[i])

        if cfg.enabled and running:
            over_ticks = over_ticks + 1 if used > cfg.high_watermark * capacity else 0
            if over_ticks >= cfg.hysteresis_ticks:
                extra += relieve(cfg.low_watermark * capacity)
                over_ticks = 0

        if not admitted and not running:
            continue  # everything left in the queue was unservable

        # with nothing to admit or relieve, the next iterations only decode, and
        # their cost grows linearly; jump to the next arrival or completion
        quiet = (
            not admitted
            and extra == 0.0
            and cost_model.jitter_prob == 0.0
            and not (cfg.enabled and used > cfg.high_watermark * capacity and np.any(st.k[running] < st.cap[running]))
        )
        dt = extra
        splits = 0
        steps = 1
        phases = []
        if admitted:
            phases.append((st.k[admitted], st.prompt[admitted], True))
        if running:
            ids = np.asarray(running)
            phases.append((st.k[ids], st.prompt[ids] + st.generated[ids], False))
        for ks_, lens, pre in phases:
            c, split, slope = iteration_cost(ks_, lens, pre, n, cost_model)
            if quiet:
                ids = np.asarray(running)
                steps = int(np.min(st.output[ids] - st.generated[ids]))
                if nxt < N:
                    steps = min(steps, _steps_until(arrivals[nxt] - t, c, slope))
                c = steps * c + slope * steps * (steps - 1) / 2.0
            dt += c
            splits += int(split.sum()) * steps
            layer_splits[order_idx[split]] += steps
        if cost_model.jitter_prob > 0:
            pool = admitted + running
            soft = 1.0 - float(np.mean(st.k[pool])) / n
            if rng.random() < cost_model.jitter_prob * soft:
                dt += cost_model.jitter_ms
        t += dt

        if running:
            ids = np.asarray(running)
            st.generated[ids] += steps
        for i in admitted:
            st.generated[i] = 1  # prefill emits the first token
        still = []
        for i in running + admitted:
            if st.generated[i] >= st.output[i]:
                finish_t[i] = t
                used -= st.reserved[i]
                st.reserved[i] = 0
            else:
                still.append(i)
        running = still

        pool = np.asarray(running, dtype=np.int64)
        series["time"].append(t)
        series["mem"].append(used / capacity)
        series["conv"].append(float(st.k[pool].mean()) / n if pool.size else 0.0)
        series["run"].append(len(running))
        series["queue"].append(len(queue))
        series["split"].append(splits)
        series["steps"].append(steps)

    served = ~np.isnan(finish_t)
    latency = np.full(N, np.nan)
    latency[served] = (finish_t[served] - arrivals[served]) / st.output[served]
    delay = np.full(N, np.nan)
    delay[served] = admit_t[served] - arrivals[served]
    gen = np.where(served, st.generated, 0)
    report = SimReport(
        policy_enabled=cfg.enabled,
        normalized_latency=latency,
        queue_delay_ms=delay,
        conversions=st.k.copy(),
        generated_tokens=gen,
        unserved=sorted(unserved),
        time_ms=np.asarray(series["time"]),
        memory_fraction=np.asarray(series["mem"]),
        conversion_rate=np.asarray(series["conv"]),
        running=np.asarray(series["run"], dtype=np.int64),
        queued=np.asarray(series["queue"], dtype=np.int64),
        split_layers=np.asarray(series["split"], dtype=np.int64),
        steps=np.asarray(series["steps"], dtype=np.int64),
        layer_splits=layer_splits,
    )
    return report
