import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsla.attention import LayerKind
from dsla.errors import ConfigError, DomainError
from dsla.serve.cost import (
    CostModel,
    Phase,
    batch_cost,
    cost_model_text,
    dsla_state_bytes,
    kv_cache_bytes,
    step_cost,
)
from dsla.config import parse_flat, from_mapping

T, D = LayerKind.TEACHER, LayerKind.DSLA
PRE, DEC = Phase.PREFILL, Phase.DECODE


def test_kv_examples():
    assert kv_cache_bytes(32, 1, 4096, 32, 128, 2) == 2_147_483_648
    assert kv_cache_bytes(1, 1, 4096, 32, 128, 2) == 67_108_864
    assert kv_cache_bytes(32, 1, 8192, 32, 128, 2) == 2 * 2_147_483_648


dims = st.integers(1, 512)


@settings(max_examples=100, deadline=None)
@given(n=dims, b=dims, s=dims, h=dims, d_h=dims, B=st.sampled_from([2, 4, 8]), which=st.integers(0, 5), c=st.integers(2, 9))
def test_kv_linear_in_each_argument(n, b, s, h, d_h, B, which, c):
    args = [n, b, s, h, d_h, B]
    base = kv_cache_bytes(*args)
    assert base == 2 * n * b * s * h * d_h * B
    if which == 5:
        return  # bytes per element is restricted to {2, 4, 8}
    scaled = list(args)
    scaled[which] *= c
    assert kv_cache_bytes(*scaled) == c * base


@pytest.mark.parametrize(
    "args",
    [(0, 1, 1, 1, 1, 2), (1, -3, 1, 1, 1, 2), (1, 1, 2.0, 1, 1, 2), (1, 1, 1, True, 1, 2), (1, 1, 1, 1, 1, "2")],
)
def test_kv_rejects_bad_arguments(args):
    with pytest.raises(DomainError):
        kv_cache_bytes(*args)


def test_kv_overflow_guard():
    assert kv_cache_bytes(2**20, 2**20, 2**10, 2**10, 1, 2) == 2**62
    with pytest.raises(DomainError):
        kv_cache_bytes(2**20, 2**20, 2**10, 2**10, 1, 4)


def test_numpy_integers_accepted():
    assert kv_cache_bytes(np.int64(2), 1, 3, 1, 1, 2) == 24


def test_state_bytes():
    # two d_h x d_h states per head and layer
    assert dsla_state_bytes(1, 1, 32, 128, 2) == 2 * 32 * 128 * 128 * 2


def test_dsla_decode_constant():
    cm = CostModel()
    assert step_cost(D, DEC, 100, cm) == step_cost(D, DEC, 10_000, cm) == cm.dsla_decode_c


def test_teacher_prefill_quadratic():
    cm = CostModel()
    s = 100_000
    assert step_cost(T, PRE, 2 * s, cm) / step_cost(T, PRE, s, cm) == pytest.approx(4.0, rel=1e-4)


def test_linear_shapes():
    cm = CostModel()
    assert step_cost(T, DEC, 2000, cm) - step_cost(T, DEC, 1000, cm) == pytest.approx(1000 * cm.teacher_decode_a)
    assert step_cost(D, PRE, 2000, cm) - step_cost(D, PRE, 1000, cm) == pytest.approx(1000 * cm.dsla_prefill_a)


def test_crossover_at_2k():
    cm = CostModel()
    aT, cT, aD, cD = cm.teacher_prefill_a, cm.teacher_prefill_c, cm.dsla_prefill_a, cm.dsla_prefill_c
    # independent solve of aT s^2 + cT = aD s + cD
    roots = np.roots([aT, -aD, cT - cD])
    assert max(roots.real) == pytest.approx(2048, rel=1e-12)
    assert cm.prefill_crossover() == pytest.approx(2048, rel=1e-12)
    for s in (256, 1024, 2000):
        assert step_cost(T, PRE, s, cm) < step_cost(D, PRE, s, cm)
    for s in (2100, 4096, 16384):
        assert step_cost(T, PRE, s, cm) > step_cost(D, PRE, s, cm)


def test_gla_billed_as_dsla():
    cm = CostModel()
    assert step_cost(LayerKind.GLA, PRE, 500, cm) == step_cost(D, PRE, 500, cm)


def test_batch_cost():
    cm = CostModel()
    for kind in (T, D):
        for phase in (PRE, DEC):
            assert batch_cost(kind, phase, [700], cm) == step_cost(kind, phase, 700, cm)
            assert batch_cost(kind, phase, [], cm) == 0.0
    lens = [100, 200, 300]
    expected = cm.teacher_decode_c + 2 * cm.teacher_decode_m + cm.teacher_decode_a * 600
    assert batch_cost(T, DEC, lens, cm) == pytest.approx(expected, rel=1e-15)


def test_cost_domain():
    with pytest.raises(DomainError):
        step_cost(T, DEC, 0, CostModel())
    with pytest.raises(ConfigError):
        CostModel(teacher_decode_c=-1.0)
    with pytest.raises(ConfigError):
        CostModel(jitter_prob=2.0)


def test_cost_text_round_trip():
    cm = CostModel(split_overhead=0.125)
    assert from_mapping(CostModel, parse_flat(cost_model_text(cm))) == cm
