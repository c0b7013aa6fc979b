import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsla.attention import LayerKind, LayerParams, random_layer, teacher_forward
from dsla.distill.toy import ToyModel, diffuse_layer, recall_dataset, recall_layer
from dsla.errors import DomainError
from dsla.sensitivity import attention_entropy, layer_entropy, rank_layers, ranking_csv, sensitivity_report


def test_entropy_examples():
    assert attention_entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert attention_entropy([0, 0, 1, 0]) == 0.0
    assert attention_entropy([0.5, 0.5, 0, 0]) == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("T", [1, 2, 7, 64, 1000])
def test_uniform_row_is_log_T(T):
    assert attention_entropy(np.full(T, 1.0 / T)) == pytest.approx(math.log(T), abs=1e-12)


def test_entropy_rejects_bad_rows():
    for row in ([0.5, 0.6], [-0.1, 1.1], [], [[0.5, 0.5]], [np.nan, 1.0]):
        with pytest.raises(DomainError):
            attention_entropy(row)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20).filter(lambda r: sum(r) > 1e-3))
def test_entropy_bounds(raw):
    row = np.asarray(raw) / np.sum(raw)
    H = attention_entropy(row)
    assert 0.0 <= H <= math.log(len(row)) + 1e-12


def _uniform_teacher(d, heads):
    z = np.zeros((d, d))
    return LayerParams(LayerKind.TEACHER, z, z.copy(), np.eye(d), np.eye(d), heads=heads)


def test_uniform_layer_entropy_is_log_T():
    model = ToyModel([_uniform_teacher(4, 2)])
    X = np.random.default_rng(0).normal(size=(9, 4))
    s = layer_entropy(model, 0, [X])
    assert s.mean_entropy == pytest.approx(math.log(9), abs=1e-12)
    assert s.sample_count == 2
    full = layer_entropy(model, 0, [X], full_matrix=True)
    assert full.mean_entropy == pytest.approx(np.mean([math.log(t + 1) for t in range(9)]), abs=1e-12)


def test_duplicate_calibration_same_mean():
    rng = np.random.default_rng(1)
    model = ToyModel([random_layer("teacher", 4, rng, heads=2, scale=1.5)])
    X = rng.normal(size=(6, 4))
    once = layer_entropy(model, 0, [X])
    twice = layer_entropy(model, 0, [X, X])
    assert twice.mean_entropy == pytest.approx(once.mean_entropy, abs=1e-14)
    assert twice.sample_count == 2 * once.sample_count


def test_layer_entropy_loop_oracle():
    rng = np.random.default_rng(2)
    layers = [random_layer("teacher", 4, rng, heads=2, scale=1.5) for _ in range(2)]
    model = ToyModel(layers)
    cal = [rng.normal(size=(5, 4)) for _ in range(3)]
    values = []
    for X in cal:
        h = X + np.tanh(teacher_forward(layers[0], X).outputs[0])
        A = teacher_forward(layers[1], h).attn[0]
        for hd in range(2):
            values.append(-sum(p * math.log(p) for p in A[hd, -1] if p > 0))
    assert layer_entropy(model, 1, cal).mean_entropy == pytest.approx(np.mean(values), abs=1e-12)


def test_rank_ascending_entropy():
    rng = np.random.default_rng(3)
    layers = [diffuse_layer(8, 2, rng), recall_layer(8, 2, rng), diffuse_layer(8, 2, rng, qk_scale=0.0)]
    model = ToyModel(layers)
    cal = list(recall_dataset(4, 12, 8, rng))
    report = sensitivity_report(model, cal)
    order = [s.layer_index for s in report]
    assert order[0] == 1  # the sharp recall layer is least sensitive
    assert sorted(order) == [0, 1, 2]
    ents = [s.mean_entropy for s in report]
    assert ents == sorted(ents)
    assert rank_layers(model, cal) == order == rank_layers(model, cal)


def test_rank_ties_go_to_lower_index():
    model = ToyModel([_uniform_teacher(4, 1) for _ in range(4)])
    cal = [np.random.default_rng(4).normal(size=(5, 4))]
    assert rank_layers(model, cal) == [0, 1, 2, 3]


def test_converted_layers_ranked_first():
    rng = np.random.default_rng(5)
    layers = [random_layer("teacher", 4, rng), random_layer("dsla", 4, rng), random_layer("teacher", 4, rng)]
    order = rank_layers(ToyModel(layers), [rng.normal(size=(4, 4))])
    assert order[0] == 1 and sorted(order) == [0, 1, 2]


def test_ranking_errors():
    model = ToyModel([_uniform_teacher(4, 1)])
    with pytest.raises(DomainError):
        layer_entropy(model, 0, [])
    with pytest.raises(DomainError):
        layer_entropy(model, 0, [np.zeros((2, 3, 4))])
    with pytest.raises(DomainError):
        rank_layers(ToyModel([random_layer("gla", 4, np.random.default_rng(0))]), [np.zeros((3, 4))])


def test_ranking_csv():
    model = ToyModel([_uniform_teacher(4, 1), _uniform_teacher(4, 1)])
    text = ranking_csv(sensitivity_report(model, [np.ones((3, 4))]))
    lines = text.strip().splitlines()
    assert lines[0] == "layer,mean_entropy,rank"
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "1"]
