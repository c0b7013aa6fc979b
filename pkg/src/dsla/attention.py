"""Teacher softmax attention, gated linear attention and dual-state linear attention.

All routines work in float64 and accept a single sequence ``(T, d)`` or a
batch ``(B, T, d)``.  Per-head quantities are laid out ``(B, h, T, d_h)``.

The linear-attention state recurs as::

    S_t = G_t * S_{t-1} + outer(k_t, v_t)
    o_t = q_t @ S_t

with a rank-one gate ``G_t = outer(alpha_t, beta_t)``.  The dual-state layer
keeps a history state and a recency state with separate gates and reads out
``q_t @ (gamma * S1_t + (1 - gamma) * S2_t)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import DomainError, NumericError, ShapeError

__all__ = [
    "LayerKind",
    "GateProjection",
    "LayerParams",
    "DualState",
    "AttentionProfile",
    "ForwardTrace",
    "TeacherTrace",
    "ScoreExpansion",
    "project_qkv",
    "compute_gate",
    "gate_vectors",
    "gla_step",
    "gla_output",
    "dsla_step",
    "dsla_output",
    "forward_sequence",
    "teacher_forward",
    "layer_forward",
    "causal_softmax",
    "attention_scores_parallel",
    "attention_profiles",
    "init_gate",
    "random_layer",
]


class LayerKind(str, enum.Enum):
    TEACHER = "teacher"
    GLA = "gla"
    DSLA = "dsla"


@dataclass(frozen=True)
class GateProjection:
    """Affine maps producing the two factors of a rank-one forget gate."""

    A_alpha: np.ndarray
    b_alpha: np.ndarray
    A_beta: np.ndarray
    b_beta: np.ndarray

    def __post_init__(self):
        d = self.A_alpha.shape[0]
        for name in ("A_alpha", "A_beta"):
            a = getattr(self, name)
            if a.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {a.shape}")
        for name in ("b_alpha", "b_beta"):
            b = getattr(self, name)
            if b.shape != (d,):
                raise ShapeError(f"{name} must have length {d}, got {b.shape}")
        for name in ("A_alpha", "b_alpha", "A_beta", "b_beta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"gate parameter {name} is not finite")

    @property
    def d(self) -> int:
        return self.A_alpha.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "A_alpha": self.A_alpha,
            "b_alpha": self.b_alpha,
            "A_beta": self.A_beta,
            "b_beta": self.b_beta,
        }


@dataclass(frozen=True)
class LayerParams:
    """Weights of one attention layer.

    ``gamma`` is the history/recency blend of a dual-state layer and must lie
    in [0, 1].  Optimisation happens on its logit (see :attr:`gamma_logit`).
    """

    kind: LayerKind
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    heads: int = 1
    gate1: Optional[GateProjection] = None
    gate2: Optional[GateProjection] = None
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        d = self.W_q.shape[0]
        for name in ("W_q", "W_k", "W_v", "W_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise NumericError(f"{name} is not finite")
        if self.heads < 1 or d % self.heads:
            raise ShapeError(f"model dimension {d} is not divisible by {self.heads} heads")
        if self.kind is LayerKind.TEACHER:
            if self.gate1 is not None or self.gate2 is not None:
                raise ShapeError("teacher layers carry no gates")
        else:
            if self.gate1 is None:
                raise ShapeError(f"{self.kind.value} layer requires gate1")
            if (self.gate2 is not None) != (self.kind is LayerKind.DSLA):
                raise ShapeError("gate2 must be present exactly for dsla layers")
            for g in (self.gate1, self.gate2):
                if g is not None and g.d != d:
                    raise ShapeError("gate dimension does not match the layer")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def gamma_logit(self) -> float:
        g = min(max(self.gamma, 1e-15), 1.0 - 1e-15)
        return float(np.log(g) - np.log1p(-g))

    def with_gamma_logit(self, z: float) -> "LayerParams":
        return replace(self, gamma=float(expit(z)))

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every weight (gamma excluded)."""
        out = {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}
        for prefix, g in (("gate1", self.gate1), ("gate2", self.gate2)):
            if g is not None:
                out.update({f"{prefix}.{k}": v for k, v in g.arrays().items()})
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "LayerParams":
        """Copy with weights taken from a flat mapping as produced by :meth:`arrays`."""
        gates = {}
        for prefix, g in (("gate1", self.gate1), ("gate2", self.gate2)):
            if g is None:
                gates[prefix] = None
            else:
                gates[prefix] = GateProjection(
                    **{k: arrays.get(f"{prefix}.{k}", v) for k, v in g.arrays().items()}
                )
        return replace(
            self,
            W_q=arrays.get("W_q", self.W_q),
            W_k=arrays.get("W_k", self.W_k),
            W_v=arrays.get("W_v", self.W_v),
            W_o=arrays.get("W_o", self.W_o),
            gate1=gates["gate1"],
            gate2=gates["gate2"],
        )


@dataclass(frozen=True)
class DualState:
    S1: np.ndarray
    S2: np.ndarray

    def __post_init__(self):
        if self.S1.shape != self.S2.shape:
            raise ShapeError(f"state shapes differ: {self.S1.shape} vs {self.S2.shape}")

    @classmethod
    def zeros(cls, d: int) -> "DualState":
        return cls(np.zeros((d, d)), np.zeros((d, d)))


@dataclass
class AttentionProfile:
    """Score of the final query against every token, for one (layer, head).

    For dual-state layers ``history`` and ``recency`` hold the norms of the
    two per-state score vectors, already multiplied by ``gamma`` and
    ``1 - gamma``.
    """

    layer_index: int
    head_index: int
    scores: np.ndarray
    kind: LayerKind = LayerKind.TEACHER
    history: Optional[np.ndarray] = None
    recency: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    """Everything the reverse pass needs from a linear-attention forward run."""

    outputs: np.ndarray  # (B, T, d), after W_o
    mixed: np.ndarray  # (B, T, d), head outputs before W_o
    q: np.ndarray  # (B, h, T, dh)
    k: np.ndarray
    v: np.ndarray
    alpha1: np.ndarray  # (B, T, d)
    beta1: np.ndarray
    S1: np.ndarray  # (B, h, T, dh, dh)
    alpha2: Optional[np.ndarray] = None
    beta2: Optional[np.ndarray] = None
    S2: Optional[np.ndarray] = None
    gamma: float = 1.0
    batched: bool = True

    def gates1(self) -> np.ndarray:
        """Full ``(B, T, d, d)`` history (or single) gates."""
        return self.alpha1[..., :, None] * self.beta1[..., None, :]

    def gates2(self) -> Optional[np.ndarray]:
        if self.alpha2 is None:
            return None
        return self.alpha2[..., :, None] * self.beta2[..., None, :]


@dataclass
class TeacherTrace:
    outputs: np.ndarray  # (B, T, d)
    attn: np.ndarray  # (B, h, T, T)
    mixed: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    batched: bool = True


@dataclass
class ScoreExpansion:
    """Per-token score vectors of the final query in the unrolled form.

    ``sigma1[b, h, t]`` is ``(q_T * k_t) @ prod_{tau > t} G1_tau`` (elementwise
    product of the gates).  The final output is ``sum_t sigma_t * v_t``.
    """

    sigma1: np.ndarray  # (B, h, T, dh)
    v: np.ndarray  # (B, h, T, dh)
    W_o: np.ndarray
    sigma2: Optional[np.ndarray] = None
    gamma: float = 1.0

    def blended(self) -> np.ndarray:
        if self.sigma2 is None:
            return self.sigma1
        return self.gamma * self.sigma1 + (1.0 - self.gamma) * self.sigma2

    def scores(self) -> np.ndarray:
        """``||gamma sigma1_t + (1 - gamma) sigma2_t||_2``, shape (B, h, T)."""
        return np.linalg.norm(self.blended(), axis=-1)

    def reconstruct(self) -> np.ndarray:
        """Head-mixed output at the final position, shape (B, d), before W_o."""
        per_head = np.sum(self.blended() * self.v, axis=-2)  # (B, h, dh)
        return per_head.reshape(per_head.shape[0], -1)

    def reconstruct_output(self) -> np.ndarray:
        return self.reconstruct() @ self.W_o


def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X[None], False
    if X.ndim != 3:
        raise ShapeError(f"expected (T, d) or (B, T, d) tokens, got shape {X.shape}")
    return X, True


def _unbatch(a: np.ndarray, batched: bool) -> np.ndarray:
    return a if batched else a[0]


def _split_heads(M: np.ndarray, heads: int) -> np.ndarray:
    B, T, d = M.shape
    return M.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(M: np.ndarray) -> np.ndarray:
    B, h, T, dh = M.shape
    return M.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def _check_tokens(X: np.ndarray, p: LayerParams) -> None:
    if X.shape[-1] != p.d:
        raise ShapeError(f"token dimension {X.shape[-1]} does not match layer dimension {p.d}")
    if X.shape[-2] < 1:
        raise ShapeError("sequence must contain at least one token")
    if not np.all(np.isfinite(X)):
        raise NumericError("input tokens are not finite")


def project_qkv(X, p: LayerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(X @ W_q, X @ W_k, X @ W_v)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-1] != p.d:
        raise ShapeError(f"cannot project tokens of shape {X.shape} with a {p.d}-dim layer")
    return X @ p.W_q, X @ p.W_k, X @ p.W_v


def gate_vectors(X, g: GateProjection) -> tuple[np.ndarray, np.ndarray]:
    """Logistic gate factors ``alpha, beta`` for every token (shape ``(..., d)``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != g.d:
        raise ShapeError(f"token dimension {X.shape[-1]} does not match gate dimension {g.d}")
    alpha = expit(X @ g.A_alpha.T + g.b_alpha)
    beta = expit(X @ g.A_beta.T + g.b_beta)
    return alpha, beta


def compute_gate(x_t, g: GateProjection) -> np.ndarray:
    """Rank-one forget gate ``outer(alpha, beta)`` for a single token."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (g.d,):
        raise ShapeError(f"expected a length-{g.d} token, got shape {x_t.shape}")
    if not np.all(np.isfinite(x_t)):
        raise NumericError("gate input is not finite")
    alpha, beta = gate_vectors(x_t, g)
    return np.outer(alpha, beta)


def gla_step(S_prev, G, k, v) -> np.ndarray:
    """One gated update ``G * S_prev + outer(k, v)``; broadcasts over leading axes."""
    S_prev = np.asarray(S_prev, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if S_prev.shape != G.shape or S_prev.shape[-2:] != (k.shape[-1], v.shape[-1]):
        raise ShapeError(
            f"incompatible shapes: S {S_prev.shape}, G {G.shape}, k {k.shape}, v {v.shape}"
        )
    return G * S_prev + k[..., :, None] * v[..., None, :]


def gla_output(q, S) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if q.shape[-1] != S.shape[-2]:
        raise ShapeError(f"query of shape {q.shape} cannot read a state of shape {S.shape}")
    return np.einsum("...i,...ij->...j", q, S)


def dsla_step(st: DualState, G1, G2, k, v) -> DualState:
    """Advance both states; each recurs on its own previous value."""
    return DualState(gla_step(st.S1, G1, k, v), gla_step(st.S2, G2, k, v))


def _blend(S1: np.ndarray, S2: np.ndarray, gamma: float) -> np.ndarray:
    return gamma * S1 + (1.0 - gamma) * S2


def dsla_output(q, st: DualState, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    return gla_output(q, _blend(st.S1, st.S2, gamma))


def _head_gates(X: np.ndarray, g: GateProjection, heads: int):
    alpha, beta = gate_vectors(X, g)
    return alpha, beta, _split_heads(alpha, heads), _split_heads(beta, heads)


def _run_state(a: np.ndarray, b: np.ndarray, k: np.ndarray, v: np.ndarray, which: str) -> np.ndarray:
    B, h, T, dh = k.shape
    states = np.empty((B, h, T, dh, dh))
    S = np.zeros((B, h, dh, dh))
    for t in range(T):
        G = a[:, :, t, :, None] * b[:, :, t, None, :]
        S = gla_step(S, G, k[:, :, t], v[:, :, t])
        if not np.all(np.isfinite(S)):
            raise NumericError(f"{which} state became non-finite at step {t}")
        states[:, :, t] = S
    return states


def forward_sequence(p: LayerParams, X) -> ForwardTrace:
    """Run a GLA or DSLA layer over a sequence with the recurrent rule.

    States start at zero.  Cost is linear in the sequence length.  The
    returned trace keeps every gate factor and state for the reverse pass.
    """
    if p.kind is LayerKind.TEACHER:
        raise DomainError("forward_sequence needs a gla or dsla layer; use teacher_forward")
    X, batched = _as_batch(X)
    _check_tokens(X, p)
    Q, K, V = project_qkv(X, p)
    q, k, v = (_split_heads(M, p.heads) for M in (Q, K, V))

    alpha1, beta1, a1, b1 = _head_gates(X, p.gate1, p.heads)
    S1 = _run_state(a1, b1, k, v, "history" if p.kind is LayerKind.DSLA else "gla")
    if p.kind is LayerKind.DSLA:
        alpha2, beta2, a2, b2 = _head_gates(X, p.gate2, p.heads)
        S2 = _run_state(a2, b2, k, v, "recency")
        M = _blend(S1, S2, p.gamma)
        gamma = p.gamma
    else:
        alpha2 = beta2 = S2 = None
        M = S1
        gamma = 1.0

    mixed = _merge_heads(gla_output(q, M))
    out = mixed @ p.W_o
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out))[0][1])
        raise NumericError(f"output became non-finite at step {bad}")
    return ForwardTrace(
        outputs=out,
        mixed=mixed,
        q=q,
        k=k,
        v=v,
        alpha1=alpha1,
        beta1=beta1,
        S1=S1,
        alpha2=alpha2,
        beta2=beta2,
        S2=S2,
        gamma=gamma,
        batched=batched,
    )


def causal_softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis with future positions masked out."""
    T = logits.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    z = np.where(mask, -np.inf, logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_forward(p: LayerParams, X) -> TeacherTrace:
    """Causal multi-head softmax attention with ``1/sqrt(d_h)`` logit scaling."""
    if p.kind is not LayerKind.TEACHER:
        raise DomainError("teacher_forward needs a teacher layer")
    X, batched = _as_batch(X)
    _check_tokens(X, p)
    Q, K, V = project_qkv(X, p)
    q, k, v = (_split_heads(M, p.heads) for M in (Q, K, V))
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(p.head_dim)
    A = causal_softmax(logits)
    mixed = _merge_heads(A @ v)
    return TeacherTrace(
        outputs=mixed @ p.W_o, attn=A, mixed=mixed, q=q, k=k, v=v, batched=batched
    )


def layer_forward(p: LayerParams, X) -> np.ndarray:
    """Outputs of any layer kind, same leading shape as ``X``."""
    if p.kind is LayerKind.TEACHER:
        tr = teacher_forward(p, X)
    else:
        tr = forward_sequence(p, X)
    return _unbatch(tr.outputs, tr.batched)


def _suffix_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``P[t] = prod_{tau=t+1}^{T-1} outer(a_tau, b_tau)`` elementwise; shape (B,h,T,dh,dh)."""
    B, h, T, dh = a.shape
    P = np.empty((B, h, T, dh, dh))
    P[:, :, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        P[:, :, t] = P[:, :, t + 1] * (a[:, :, t + 1, :, None] * b[:, :, t + 1, None, :])
    if not np.all(np.isfinite(P)):
        raise NumericError("gate product is not finite")
    return P


def attention_scores_parallel(p: LayerParams, X) -> ScoreExpansion:
    """Unrolled per-token scores of the final query (no recurrence involved)."""
    if p.kind is LayerKind.TEACHER:
        raise DomainError("score expansion is defined for gla and dsla layers")
    X, _ = _as_batch(X)
    _check_tokens(X, p)
    Q, K, V = project_qkv(X, p)
    q, k, v = (_split_heads(M, p.heads) for M in (Q, K, V))
    qk = q[:, :, -1:, :] * k  # (B, h, T, dh)

    def expand(g: GateProjection) -> np.ndarray:
        _, _, a, b = _head_gates(X, g, p.heads)
        P = _suffix_products(a, b)
        return np.einsum("bhti,bhtij->bhtj", qk, P)

    sigma1 = expand(p.gate1)
    if p.kind is LayerKind.DSLA:
        return ScoreExpansion(sigma1=sigma1, v=v, W_o=p.W_o, sigma2=expand(p.gate2), gamma=p.gamma)
    return ScoreExpansion(sigma1=sigma1, v=v, W_o=p.W_o)


def attention_profiles(p: LayerParams, X, layer_index: int = 0) -> list[AttentionProfile]:
    """Final-query score profile of one sequence, one entry per head."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("attention_profiles expects a single (T, d) sequence")
    if p.kind is LayerKind.TEACHER:
        A = teacher_forward(p, X).attn[0]
        return [
            AttentionProfile(layer_index, hd, A[hd, -1].copy(), LayerKind.TEACHER)
            for hd in range(p.heads)
        ]
    ex = attention_scores_parallel(p, X)
    out = []
    for hd in range(p.heads):
        prof = AttentionProfile(layer_index, hd, ex.scores()[0, hd], p.kind)
        if p.kind is LayerKind.DSLA:
            prof.history = np.linalg.norm(p.gamma * ex.sigma1[0, hd], axis=-1)
            prof.recency = np.linalg.norm((1.0 - p.gamma) * ex.sigma2[0, hd], axis=-1)
        out.append(prof)
    return out


def init_gate(
    d: int,
    rng: np.random.Generator,
    bias: float = 0.0,
    std: float = 0.02,
) -> GateProjection:
    """Gate projection with ``N(0, std^2)`` weights and a constant bias.

    ``bias=4`` gives gate entries near 0.93 (close to the all-ones identity of
    the Hadamard product); ``bias=0`` gives entries near 0.25.
    """
    return GateProjection(
        A_alpha=rng.normal(0.0, std, (d, d)),
        b_alpha=np.full(d, float(bias)),
        A_beta=rng.normal(0.0, std, (d, d)),
        b_beta=np.full(d, float(bias)),
    )


def random_layer(
    kind: LayerKind | str,
    d: int,
    rng: np.random.Generator,
    heads: int = 1,
    scale: Optional[float] = None,
    gate_std: float = 0.5,
    gamma: float = 0.5,
) -> LayerParams:
    """Seeded layer for tests and demos; gate weights are deliberately non-trivial."""
    kind = LayerKind(kind)
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    W = [rng.normal(0.0, scale, (d, d)) for _ in range(4)]
    g1 = g2 = None
    if kind is not LayerKind.TEACHER:
        g1 = GateProjection(
            rng.normal(0, gate_std, (d, d)), rng.normal(1.0, 0.5, d),
            rng.normal(0, gate_std, (d, d)), rng.normal(1.0, 0.5, d),
        )
    if kind is LayerKind.DSLA:
        g2 = GateProjection(
            rng.normal(0, gate_std, (d, d)), rng.normal(0.0, 0.5, d),
            rng.normal(0, gate_std, (d, d)), rng.normal(0.0, 0.5, d),
        )
    return LayerParams(kind, *W, heads=heads, gate1=g1, gate2=g2, gamma=gamma)
