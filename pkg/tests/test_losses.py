import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsla.attention import GateProjection, LayerKind, LayerParams, layer_forward, random_layer
from dsla.distill.losses import backward, contrastive_loss, distill_loss, layer_loss, total_loss
from dsla.errors import DomainError, NumericError, ShapeError


def _loss_fn(p, X, target, lam):
    return layer_loss(p, X, target, lam).total


def _finite_difference(p, X, target, lam, eps=1e-5):
    grads = {}
    arrays = p.arrays()
    for name, a in arrays.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            hi, lo = a.copy(), a.copy()
            hi[idx] += eps
            lo[idx] -= eps
            f_hi = _loss_fn(p.with_arrays({name: hi}), X, target, lam)
            f_lo = _loss_fn(p.with_arrays({name: lo}), X, target, lam)
            g[idx] = (f_hi - f_lo) / (2 * eps)
        grads[name] = g
    z = p.gamma_logit
    grads["gamma_logit"] = np.asarray(
        (_loss_fn(p.with_gamma_logit(z + eps), X, target, lam) - _loss_fn(p.with_gamma_logit(z - eps), X, target, lam))
        / (2 * eps)
    )
    return grads


def _rel_err(a, n):
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else np.linalg.norm(a - n) / scale


# distill_loss


def test_kl_identical_is_zero():
    O = np.random.default_rng(0).normal(size=(5, 4))
    assert distill_loss(O, O.copy()) < 1e-12


def test_kl_scalar_oracle():
    teacher = np.array([[10.0, 0.0]])
    student = np.array([[0.0, 0.0]])
    p1 = 1.0 / (1.0 + math.exp(-10.0))
    p = [p1, 1.0 - p1]
    expected = sum(pi * math.log(pi / 0.5) for pi in p)
    assert distill_loss(student, teacher) == pytest.approx(expected, rel=1e-12)


def test_kl_averages_over_tokens():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    per_token = [distill_loss(s[i : i + 1], t[i : i + 1]) for i in range(4)]
    assert distill_loss(s, t) == pytest.approx(np.mean(per_token), rel=1e-12)


def test_mse_mode():
    s, t = np.ones((2, 2)), np.zeros((2, 2))
    assert distill_loss(s, t, mode="mse") == 1.0
    with pytest.raises(DomainError):
        distill_loss(s, t, mode="l1")


def test_distill_errors():
    with pytest.raises(ShapeError):
        distill_loss(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(NumericError):
        distill_loss(np.full((1, 2), np.nan), np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 20.0))
def test_kl_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    assert distill_loss(rng.normal(0, scale, (3, 5)), rng.normal(0, scale, (3, 5))) >= 0.0


# contrastive_loss


def test_contrastive_equal_and_scaled():
    rng = np.random.default_rng(2)
    G = rng.uniform(0.01, 1, size=(6, 3, 3))
    assert contrastive_loss(G, G) == pytest.approx(1.0, abs=1e-15)
    assert contrastive_loss(G, 0.3 * G) == pytest.approx(1.0, abs=1e-15)


def test_contrastive_loop_oracle():
    rng = np.random.default_rng(3)
    G1, G2 = rng.uniform(size=(4, 3, 3)), rng.uniform(size=(4, 3, 3))
    cos = []
    for a, b in zip(G1, G2):
        a, b = a.ravel(), b.ravel()
        dot = sum(x * y for x, y in zip(a, b))
        cos.append(dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))))
    assert contrastive_loss(G1, G2) == pytest.approx(sum(cos) / 4, abs=1e-14)


def test_contrastive_errors():
    with pytest.raises(ShapeError):
        contrastive_loss(np.ones((2, 3, 3)), np.ones((3, 3, 3)))
    with pytest.raises(NumericError):
        contrastive_loss(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))


# total_loss


def test_total_loss_examples():
    rng = np.random.default_rng(4)
    O, G = rng.normal(size=(3, 4)), rng.uniform(size=(3, 2, 2))
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    G2 = rng.uniform(size=(3, 2, 2))
    assert total_loss(s, t, G, G2, 0.0).total == distill_loss(s, t)
    assert total_loss(O, O, G, G, 1.0).total == pytest.approx(1.0, abs=1e-12)
    br = total_loss(s, t, G, G2, 0.37)
    assert br.total == distill_loss(s, t) + 0.37 * contrastive_loss(G, G2)
    assert br.total == br.l_dist + br.lam * br.l_cont
    with pytest.raises(DomainError):
        total_loss(s, t, G, G2, -1.0)


# backward


@pytest.mark.parametrize("lam", [0.0, 0.5])
@pytest.mark.parametrize("mode", ["kl", "mse"])
def test_backward_matches_finite_differences(lam, mode):
    rng = np.random.default_rng(5)
    p = random_layer("dsla", 4, rng, heads=2, gamma=0.3)
    X = rng.normal(size=(2, 6, 4))
    target = rng.normal(size=(2, 6, 4))
    if mode == "mse":
        loss_fn = lambda q: layer_loss(q, X, target, lam, "mse").total
        br, grads = backward(p, X, target, lam, "mse")
        assert br.total == pytest.approx(loss_fn(p), rel=1e-12)
        name = "gate2.A_beta"
        a = p.arrays()[name]
        hi, lo = a.copy(), a.copy()
        hi[1, 2] += 1e-5
        lo[1, 2] -= 1e-5
        fd = (loss_fn(p.with_arrays({name: hi})) - loss_fn(p.with_arrays({name: lo}))) / 2e-5
        assert grads[name][1, 2] == pytest.approx(fd, rel=1e-5)
        return
    br, grads = backward(p, X, target, lam)
    numeric = _finite_difference(p, X, target, lam)
    assert set(grads) == set(numeric)
    for name in grads:
        assert grads[name].shape == numeric[name].shape
        assert _rel_err(grads[name], numeric[name]) < 1e-5, name


def test_backward_zero_at_optimum():
    rng = np.random.default_rng(6)
    p = random_layer("dsla", 4, rng)
    X = rng.normal(size=(5, 4))
    _, grads = backward(p, X, layer_forward(p, X), 0.0)
    assert max(np.max(np.abs(g)) for g in grads.values()) < 1e-8


def _first_token_instance(gamma=0.5):
    # keys fire only on the first token, the history gate keeps it, the recency gate forgets it
    d = 4
    W_q = np.zeros((d, d))
    W_q[1, 0] = 1.0
    W_k = np.zeros((d, d))
    W_k[0, 0] = 1.0
    rng = np.random.default_rng(7)
    W_v = rng.normal(size=(d, d))
    W_o = np.eye(d)
    z = np.zeros((d, d))
    keep = GateProjection(z, np.full(d, 20.0), z.copy(), np.full(d, 20.0))
    drop = GateProjection(z.copy(), np.full(d, -20.0), z.copy(), np.full(d, -20.0))
    p = LayerParams(LayerKind.DSLA, W_q, W_k, W_v, W_o, gate1=keep, gate2=drop, gamma=gamma)
    X = np.zeros((6, d))
    X[:, 1] = 1.0
    X[0, 0] = 1.0
    X[0, 2:] = [1.5, -2.0]
    X[1:, 2:] = rng.normal(size=(5, 2))
    teacher = np.tile((X[0] @ W_v) @ W_o, (6, 1))  # attends to the first token only
    return p, X, teacher


def test_gamma_gradient_sign():
    p, X, teacher = _first_token_instance()
    # the history state alone reproduces the teacher
    assert distill_loss(layer_forward(p.with_gamma_logit(40.0), X), teacher) < 1e-12
    _, grads = backward(p, X, teacher, 0.0)
    assert float(grads["gamma_logit"]) < 0
    z, eps = p.gamma_logit, 1e-5
    up = distill_loss(layer_forward(p.with_gamma_logit(z + eps), X), teacher)
    down = distill_loss(layer_forward(p.with_gamma_logit(z - eps), X), teacher)
    assert up < down
    assert float(grads["gamma_logit"]) == pytest.approx((up - down) / (2 * eps), rel=1e-5)


def test_backward_needs_dsla():
    p = random_layer("gla", 4, np.random.default_rng(8))
    with pytest.raises(DomainError):
        backward(p, np.zeros((2, 4)), np.zeros((2, 4)), 0.0)
