import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsla.attention import LayerKind
from dsla.errors import ConfigError, DomainError
from dsla.serve.controller import ControllerConfig
from dsla.serve.cost import CostModel, Phase, batch_cost, kv_cache_bytes
from dsla.serve.scheduler import schedule_batch
from dsla.serve.simulator import GIB, ModelProfile, _steps_until, iteration_cost, simulate
from dsla.serve.trace import TraceConfig, TraceRequest, generate_trace

COST = CostModel()
POLICY = ControllerConfig()
OFF = ControllerConfig(enabled=False)


@pytest.fixture(scope="module")
def busy():
    """A small trace that pushes a shrunken server past its watermarks."""
    trace = generate_trace(TraceConfig(sessions=150, session_rate=0.5), seed=11)
    profile = ModelProfile(capacity_bytes=8 * GIB, max_batch=32)
    return trace, profile


def _same_report(a, b):
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            assert np.array_equal(x, y, equal_nan=True), f.name
        else:
            assert x == y, f.name


def test_deterministic(busy):
    trace, profile = busy
    _same_report(simulate(trace, profile, POLICY, COST, 0), simulate(trace, profile, POLICY, COST, 0))


def test_deterministic_with_jitter(busy):
    trace, profile = busy
    cm = CostModel(jitter_prob=0.05)
    a = simulate(trace, profile, POLICY, cm, seed=5)
    _same_report(a, simulate(trace, profile, POLICY, cm, seed=5))
    assert a.summary() != simulate(trace, profile, POLICY, cm, seed=6).summary()


def test_conservation(busy):
    trace, profile = busy
    for cfg in (POLICY, OFF):
        rep = simulate(trace, profile, cfg, COST)
        assert rep.unserved == []
        assert rep.generated_tokens.sum() == sum(r.output_tokens for r in trace)
        assert np.all(rep.normalized_latency > 0)
        assert np.all(rep.queue_delay_ms >= 0)


def test_series_aligned(busy):
    trace, profile = busy
    rep = simulate(trace, profile, POLICY, COST)
    n = rep.time_ms.size
    for name in ("memory_fraction", "conversion_rate", "running", "queued", "split_layers", "steps"):
        assert getattr(rep, name).size == n
    assert np.all(np.diff(rep.time_ms) >= 0)
    assert np.all(rep.memory_fraction <= 1.0 + 1e-12)
    assert rep.timeline_csv().count("\n") == n + 1
    assert rep.requests_csv().count("\n") == len(trace) + 1


def test_policy_under_pressure(busy):
    trace, profile = busy
    on, off = simulate(trace, profile, POLICY, COST), simulate(trace, profile, OFF, COST)
    assert on.summary()["converted_requests"] > 0
    assert on.summary()["mean_normalized_latency_ms"] < off.summary()["mean_normalized_latency_ms"]
    caps = np.array([POLICY.layer_cap(r.prompt_tokens, profile.n) for r in sorted(trace, key=lambda r: r.arrival_time)])
    assert np.all(on.conversions <= caps)


def test_policy_off_never_converts(busy):
    trace, profile = busy
    rep = simulate(trace, profile, OFF, COST)
    assert not rep.conversions.any()
    assert not rep.conversion_rate.any()
    assert not rep.split_layers.any()


def test_single_short_request():
    rep = simulate([TraceRequest(0.0, 0, 0, 500, 20)], ModelProfile(), POLICY, COST)
    assert rep.conversions.tolist() == [0]
    assert rep.generated_tokens.tolist() == [20]
    s = rep.summary()
    assert s["served"] == 1 and s["converted_requests"] == 0


def test_single_request_latency_by_hand():
    profile = ModelProfile(n=2)
    rep = simulate([TraceRequest(0.0, 0, 0, 10, 3)], profile, OFF, COST)
    pre = 2 * (COST.teacher_prefill_a * 100 + COST.teacher_prefill_c)
    dec = lambda s: 2 * (COST.teacher_decode_a * s + COST.teacher_decode_c)
    total = pre + dec(11) + dec(12)
    assert rep.normalized_latency[0] == pytest.approx(total / 3, rel=1e-12)


def test_unservable_request_reported():
    profile = ModelProfile(capacity_bytes=GIB)
    trace = [TraceRequest(0.0, 0, 0, 16000, 100), TraceRequest(1.0, 1, 0, 100, 10)]
    rep = simulate(trace, profile, OFF, COST)
    assert rep.unserved == [0]
    assert np.isnan(rep.normalized_latency[0]) and rep.generated_tokens[0] == 0
    assert rep.generated_tokens[1] == 10
    # the policy can shrink the same request enough to fit
    assert simulate(trace, ModelProfile(capacity_bytes=6 * GIB), POLICY, COST).unserved == []


def test_queueing_recorded():
    profile = ModelProfile(capacity_bytes=4 * GIB)
    trace = [TraceRequest(0.0, i, 0, 3000, 100) for i in range(4)]
    rep = simulate(trace, profile, OFF, COST)
    assert rep.unserved == []
    assert rep.queue_delay_ms.max() > 0


def test_empty_trace():
    with pytest.raises(DomainError):
        simulate([], ModelProfile(), POLICY, COST)


def test_memory_linear_in_converted_layers():
    profile = ModelProfile()
    tokens = 3000
    full = kv_cache_bytes(profile.n, 1, tokens, profile.h, profile.d_h, profile.bytes_per_elem)
    for k in range(profile.n + 1):
        kv_part = profile.request_bytes(tokens, k) - k * profile.dsla_layer_bytes
        assert kv_part * profile.n == full * (profile.n - k)


def test_profile_validation():
    with pytest.raises(ConfigError):
        ModelProfile(bytes_per_elem=3)
    with pytest.raises(ConfigError):
        ModelProfile(n=2, conversion_order=(0, 0))
    assert ModelProfile(n=3, conversion_order=(2, 0, 1)).order == (2, 0, 1)


@settings(max_examples=60, deadline=None)
@given(
    ks=st.lists(st.integers(0, 6), min_size=1, max_size=8),
    seed=st.integers(0, 10_000),
    prefill=st.booleans(),
)
def test_iteration_cost_matches_sub_batches(ks, seed, prefill):
    # oracle: per layer, partition with schedule_batch and bill each sub-batch
    n = 6
    lengths = np.random.default_rng(seed).integers(1, 5000, len(ks))
    phase = Phase.PREFILL if prefill else Phase.DECODE
    masks = [[k > r for r in range(n)] for k in ks]
    total, splits = 0.0, []
    for layer in range(n):
        subs = schedule_batch(masks, layer)
        assert len(subs) <= 2
        for sb in subs:
            total += batch_cost(sb.kind, phase, lengths[list(sb.members)], COST)
        total += COST.split_overhead * (len(subs) == 2)
        splits.append(len(subs) == 2)
    cost, split, slope = iteration_cost(ks, lengths, prefill, n, COST)
    assert cost == pytest.approx(total, rel=1e-12)
    assert split.tolist() == splits
    if not prefill:
        bumped = iteration_cost(ks, lengths + 1, False, n, COST)[0]
        assert bumped - cost == pytest.approx(slope, rel=1e-9, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(gap=st.floats(0.0, 1e5), c0=st.floats(0.01, 100.0), slope=st.floats(0.0, 1.0))
def test_steps_until(gap, c0, slope):
    m = _steps_until(gap, c0, slope)
    span = lambda j: j * c0 + slope * j * (j - 1) / 2.0
    assert m >= 1 and span(m) >= gap
    assert m == 1 or span(m - 1) < gap


def test_fast_forward_matches_stepwise(busy):
    # jitter_prob > 0 with zero stall size disables folding without changing costs
    trace, profile = busy
    folded = simulate(trace, profile, POLICY, COST)
    stepwise = simulate(trace, profile, POLICY, CostModel(jitter_prob=1.0, jitter_ms=0.0))
    assert stepwise.steps.sum() >= folded.steps.sum()
    assert np.allclose(folded.normalized_latency, stepwise.normalized_latency, rtol=1e-9)
    assert np.array_equal(folded.conversions, stepwise.conversions)
