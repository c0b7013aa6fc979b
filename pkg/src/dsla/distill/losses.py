"""Distillation and gate-contrast losses, with an exact reverse pass through a DSLA layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from ..attention import LayerKind, LayerParams, _merge_heads, _split_heads, forward_sequence
from ..errors import DomainError, NumericError, ShapeError

LOSS_MODES = ("kl", "mse")


@dataclass(frozen=True)
class LossBreakdown:
    l_dist: float
    l_cont: float
    total: float
    lam: float


def _pair(student, teacher) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student {s.shape} and teacher {t.shape} outputs differ in shape")
    if s.ndim < 2 or s.shape[-2] < 1:
        raise ShapeError("outputs must be (T, d) with T >= 1")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite outputs")
    return s, t


def distill_loss(student_O, teacher_O, mode: str = "kl") -> float:
    """Token-averaged divergence between student and teacher outputs.

    In ``"kl"`` mode each token's output is turned into a distribution by a
    softmax over features and ``KL(teacher || student)`` is averaged over all
    tokens.  ``"mse"`` averages squared error over every element.
    """
    s, t = _pair(student_O, teacher_O)
    if mode == "kl":
        lp_t = log_softmax(t, axis=-1)
        lp_s = log_softmax(s, axis=-1)
        kl = np.sum(np.exp(lp_t) * (lp_t - lp_s), axis=-1)
        return float(max(np.mean(kl), 0.0))
    if mode == "mse":
        return float(np.mean((s - t) ** 2))
    raise DomainError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")


def _flat_gates(gates) -> np.ndarray:
    g = np.asarray(gates, dtype=np.float64)
    return g.reshape(g.shape[0], -1) if g.ndim >= 2 else g[None]


def contrastive_loss(gates1, gates2) -> float:
    """Mean cosine similarity between paired gate matrices."""
    a = _flat_gates(gates1)
    b = _flat_gates(gates2)
    if a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"gate lists differ or are empty: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("zero-norm gate in contrastive loss")
    return float(np.mean(np.sum(a * b, axis=1) / (na * nb)))


def total_loss(student_O, teacher_O, gates1, gates2, lam: float, mode: str = "kl") -> LossBreakdown:
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    l_dist = distill_loss(student_O, teacher_O, mode)
    l_cont = contrastive_loss(gates1, gates2)
    return LossBreakdown(l_dist, l_cont, l_dist + lam * l_cont, lam)


def layer_loss(p: LayerParams, X, teacher_O, lam: float, mode: str = "kl") -> LossBreakdown:
    """Forward a DSLA layer and score it; gates of every (sequence, token) enter the contrast term."""
    tr = forward_sequence(p, X)
    d = p.d
    g1 = tr.gates1().reshape(-1, d, d)
    g2 = tr.gates2().reshape(-1, d, d)
    out = tr.outputs if tr.batched else tr.outputs[0]
    return total_loss(out, teacher_O, g1, g2, lam, mode)


def _cosine_grads(x: np.ndarray, y: np.ndarray):
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    f = np.sum(x * y, axis=-1, keepdims=True) / (nx * ny)
    dx = y / (nx * ny) - f * x / nx**2
    dy = x / (nx * ny) - f * y / ny**2
    return f, dx, dy


def _state_backward(dS_local, S, a, b, k, v):
    """Reverse pass of ``S_t = outer(a_t, b_t) * S_{t-1} + outer(k_t, v_t)``.

    Returns gradients w.r.t. the per-head gate factors, keys and values.
    """
    B, h, T, dh = k.shape
    dS_all = np.empty_like(dS_local)
    carry = np.zeros((B, h, dh, dh))
    for t in range(T - 1, -1, -1):
        dS = dS_local[:, :, t] + carry
        dS_all[:, :, t] = dS
        carry = (a[:, :, t, :, None] * b[:, :, t, None, :]) * dS
    S_prev = np.concatenate([np.zeros((B, h, 1, dh, dh)), S[:, :, :-1]], axis=2)
    dG = dS_all * S_prev
    da = np.einsum("bhtij,bhtj->bhti", dG, b)
    db = np.einsum("bhtij,bhti->bhtj", dG, a)
    dk = np.einsum("bhtij,bhtj->bhti", dS_all, v)
    dv = np.einsum("bhtij,bhti->bhtj", dS_all, k)
    return da, db, dk, dv


def backward(p: LayerParams, X, teacher_O, lam: float, mode: str = "kl"):
    """Loss and exact gradients of ``l_dist + lam * l_cont`` for a DSLA layer.

    ``X`` and ``teacher_O`` are ``(T, d)`` or ``(B, T, d)``; the loss averages
    over every token of every sequence.  Gradients come back keyed like
    :meth:`LayerParams.arrays` plus ``"gamma_logit"`` (a 0-d array).
    """
    if p.kind is not LayerKind.DSLA:
        raise DomainError("backward is defined for dsla layers")
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
        teacher_O = np.asarray(teacher_O, dtype=np.float64)[None]
    tr = forward_sequence(p, X)
    O, Tt = _pair(tr.outputs, teacher_O)
    B, T, d = O.shape
    N = B * T
    h = p.heads
    gamma = p.gamma

    if mode == "kl":
        lp_t = log_softmax(Tt, axis=-1)
        lp_s = log_softmax(O, axis=-1)
        l_dist = float(max(np.sum(np.exp(lp_t) * (lp_t - lp_s)) / N, 0.0))
        dO = (softmax(O, axis=-1) - np.exp(lp_t)) / N
    elif mode == "mse":
        l_dist = float(np.mean((O - Tt) ** 2))
        dO = 2.0 * (O - Tt) / O.size
    else:
        raise DomainError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")

    # contrast term on full rank-one gates: cos(a1 b1^T, a2 b2^T) = cos(a1, a2) cos(b1, b2)
    fa, dfa1, dfa2 = _cosine_grads(tr.alpha1, tr.alpha2)
    fb, dfb1, dfb2 = _cosine_grads(tr.beta1, tr.beta2)
    l_cont = float(np.mean(fa * fb))
    w = lam / N
    dalpha1 = w * fb * dfa1
    dalpha2 = w * fb * dfa2
    dbeta1 = w * fa * dfb1
    dbeta2 = w * fa * dfb2

    grads: dict[str, np.ndarray] = {}
    grads["W_o"] = np.einsum("btd,bte->de", tr.mixed, dO)
    dH = _split_heads(dO @ p.W_o.T, h)

    M = gamma * tr.S1 + (1.0 - gamma) * tr.S2
    dq = np.einsum("bhtj,bhtij->bhti", dH, M)
    dM = tr.q[..., :, None] * dH[..., None, :]
    dgamma = float(np.sum(dM * (tr.S1 - tr.S2)))

    dk = np.zeros_like(tr.k)
    dv = np.zeros_like(tr.v)
    gate_grads = {}
    for tag, S, alpha, beta, weight, dal, dbe in (
        ("gate1", tr.S1, tr.alpha1, tr.beta1, gamma, dalpha1, dbeta1),
        ("gate2", tr.S2, tr.alpha2, tr.beta2, 1.0 - gamma, dalpha2, dbeta2),
    ):
        a_h = _split_heads(alpha, h)
        b_h = _split_heads(beta, h)
        da, db, dk_s, dv_s = _state_backward(weight * dM, S, a_h, b_h, tr.k, tr.v)
        dk += dk_s
        dv += dv_s
        dal = dal + _merge_heads(da)
        dbe = dbe + _merge_heads(db)
        gate = getattr(p, tag)
        za = dal * alpha * (1.0 - alpha)
        zb = dbe * beta * (1.0 - beta)
        gate_grads[f"{tag}.A_alpha"] = np.einsum("bti,btj->ij", za, X)
        gate_grads[f"{tag}.b_alpha"] = za.sum(axis=(0, 1))
        gate_grads[f"{tag}.A_beta"] = np.einsum("bti,btj->ij", zb, X)
        gate_grads[f"{tag}.b_beta"] = zb.sum(axis=(0, 1))
        assert gate.A_alpha.shape == gate_grads[f"{tag}.A_alpha"].shape

    grads["W_q"] = np.einsum("btd,bte->de", X, _merge_heads(dq))
    grads["W_k"] = np.einsum("btd,bte->de", X, _merge_heads(dk))
    grads["W_v"] = np.einsum("btd,bte->de", X, _merge_heads(dv))
    grads.update(gate_grads)
    grads["gamma_logit"] = np.asarray(dgamma * gamma * (1.0 - gamma))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return LossBreakdown(l_dist, l_cont, l_dist + lam * l_cont, lam), grads
