"""Sub-batch partitioning for mixed conversion masks, plus a toy executor using it.

The executor runs real (toy-scale) numerics: batched prefill followed by
incremental decoding, with a KV cache for softmax layers and the two
recurrent states for DSLA layers.  It exists so that the scheduling rule can
be checked against plain per-request execution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..attention import (
    DualState,
    LayerKind,
    LayerParams,
    dsla_output,
    forward_sequence,
    gate_vectors,
    gla_output,
    gla_step,
    teacher_forward,
)
from ..distill.toy import LayerBank, ToyModel, nonlinearity
from ..errors import DomainError, ShapeError


@dataclass(frozen=True)
class SubBatch:
    kind: LayerKind
    members: tuple  # positions in the running batch, original order


def schedule_batch(masks: Sequence[Sequence[bool]], layer_idx: int) -> list[SubBatch]:
    """Split requests by the kind they need at ``layer_idx``.

    ``masks[i][l]`` is True when request ``i`` runs layer ``l`` as DSLA.
    At most two sub-batches come back, ordered by first appearance, each
    keeping the batch order of its members.
    """
    groups: dict[LayerKind, list[int]] = {}
    for i, m in enumerate(masks):
        if not 0 <= layer_idx < len(m):
            raise ShapeError(f"layer {layer_idx} outside a {len(m)}-layer mask")
        groups.setdefault(LayerKind.DSLA if m[layer_idx] else LayerKind.TEACHER, []).append(i)
    return [SubBatch(kind, tuple(idx)) for kind, idx in groups.items()]


def next_input(h_last: np.ndarray) -> np.ndarray:
    """Continuous stand-in for sampling: the next token is ``tanh`` of the last hidden state."""
    return np.tanh(h_last)


@dataclass
class _Cache:
    k: list = field(default_factory=list)  # per layer (h, t, dh) or None
    v: list = field(default_factory=list)
    S1: list = field(default_factory=list)  # per layer (h, dh, dh) or None
    S2: list = field(default_factory=list)


def _heads(M: np.ndarray, heads: int) -> np.ndarray:
    b, d = M.shape
    return M.reshape(b, heads, d // heads)


def _decode_teacher(p: LayerParams, x: np.ndarray, caches: list[_Cache], layer: int) -> np.ndarray:
    q, k, v = (_heads(x @ W, p.heads) for W in (p.W_q, p.W_k, p.W_v))
    for i, c in enumerate(caches):
        c.k[layer] = np.concatenate([c.k[layer], k[i][:, None]], axis=1)
        c.v[layer] = np.concatenate([c.v[layer], v[i][:, None]], axis=1)
    lengths = [c.k[layer].shape[1] for c in caches]
    L = max(lengths)
    b, h, dh = q.shape
    K = np.zeros((b, h, L, dh))
    V = np.zeros((b, h, L, dh))
    valid = np.zeros((b, 1, L), dtype=bool)
    for i, c in enumerate(caches):
        K[i, :, : lengths[i]] = c.k[layer]
        V[i, :, : lengths[i]] = c.v[layer]
        valid[i, 0, : lengths[i]] = True
    logits = np.einsum("bhd,bhld->bhl", q, K) / np.sqrt(dh)
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    A = e / e.sum(axis=-1, keepdims=True)
    mixed = np.einsum("bhl,bhld->bhd", A, V).reshape(b, h * dh)
    return mixed @ p.W_o


def _decode_recurrent(p: LayerParams, x: np.ndarray, caches: list[_Cache], layer: int) -> np.ndarray:
    q, k, v = (_heads(x @ W, p.heads) for W in (p.W_q, p.W_k, p.W_v))

    def advance(g, states):
        a, b_ = (_heads(f, p.heads) for f in gate_vectors(x, g))
        return gla_step(np.stack(states), a[..., :, None] * b_[..., None, :], k, v)

    S1 = advance(p.gate1, [c.S1[layer] for c in caches])
    if p.kind is LayerKind.DSLA:
        S2 = advance(p.gate2, [c.S2[layer] for c in caches])
        out = dsla_output(q, DualState(S1, S2), p.gamma)
    else:
        S2 = None
        out = gla_output(q, S1)
    for i, c in enumerate(caches):
        c.S1[layer] = S1[i]
        c.S2[layer] = None if S2 is None else S2[i]
    b, h, dh = out.shape
    return out.reshape(b, h * dh) @ p.W_o


def _prefill_layer(p: LayerParams, H: np.ndarray, lengths: Sequence[int], caches, layer: int) -> np.ndarray:
    # right padding is harmless: causal layers never look ahead
    if p.kind is LayerKind.TEACHER:
        tr = teacher_forward(p, H)
        for i, c in enumerate(caches):
            c.k[layer] = tr.k[i, :, : lengths[i]].copy()
            c.v[layer] = tr.v[i, :, : lengths[i]].copy()
    else:
        tr = forward_sequence(p, H)
        for i, c in enumerate(caches):
            c.S1[layer] = tr.S1[i, :, lengths[i] - 1].copy()
            c.S2[layer] = None if tr.S2 is None else tr.S2[i, :, lengths[i] - 1].copy()
    return tr.outputs


@dataclass
class MixedBatchExecutor:
    """Runs a batch of requests, each with its own conversion count, over one bank.

    Request ``i`` converts the first ``ks[i]`` layers of the bank's order.
    ``split_counts[l]`` accumulates how many sub-batches layer ``l`` ran.
    """

    bank: LayerBank
    split_counts: list = field(default_factory=list)

    def __post_init__(self):
        self.split_counts = [0] * self.bank.n_layers

    def _layers(self, k: int) -> list[LayerParams]:
        return self.bank.layers_for(k)

    def _run(self, masks, H, step) -> np.ndarray:
        """Apply every layer to hidden states ``H`` (batch first), splitting per layer."""
        for layer in range(self.bank.n_layers):
            subs = schedule_batch(masks, layer)
            self.split_counts[layer] += len(subs)
            O = np.zeros_like(H)
            for sb in subs:
                idx = list(sb.members)
                p = self.bank.teacher[layer] if sb.kind is LayerKind.TEACHER else self.bank.substitutes[layer]
                O[idx] = step(p, H[idx], idx, layer)
            H = H + nonlinearity(O)
        return H

    def generate(self, prompts: Sequence[np.ndarray], ks: Sequence[int], new_tokens: Sequence[int]):
        """Final hidden state of each generated position, one ``(new, d)`` array per request."""
        n = len(prompts)
        if not n == len(ks) == len(new_tokens):
            raise ShapeError("prompts, ks and new_tokens must have equal length")
        if any(t < 1 for t in new_tokens) or any(len(P) < 1 for P in prompts):
            raise DomainError("every request needs a non-empty prompt and at least one new token")
        d = self.bank.teacher[0].d
        masks = [self.bank.mask(k) for k in ks]
        for k in ks:
            self._layers(k)  # validates that the substitutes exist
        nl = self.bank.n_layers
        caches = [_Cache([None] * nl, [None] * nl, [None] * nl, [None] * nl) for _ in range(n)]
        lengths = [len(P) for P in prompts]
        T = max(lengths)
        H = np.zeros((n, T, d))
        for i, P in enumerate(prompts):
            H[i, : lengths[i]] = P

        def prefill(p, Hs, idx, layer):
            return _prefill_layer(p, Hs, [lengths[i] for i in idx], [caches[i] for i in idx], layer)

        H = self._run(masks, H, prefill)
        last = np.stack([H[i, lengths[i] - 1] for i in range(n)])
        outputs = [[last[i]] for i in range(n)]

        def decode(p, x, idx, layer):
            sel = [caches[i] for i in idx]
            if p.kind is LayerKind.TEACHER:
                return _decode_teacher(p, x, sel, layer)
            return _decode_recurrent(p, x, sel, layer)

        live = [i for i in range(n) if new_tokens[i] > 1]
        while live:
            x = np.stack([next_input(outputs[i][-1]) for i in live])

            def step(p, xs, idx, layer, live=live):
                return decode(p, xs, [live[j] for j in idx], layer)

            h = self._run([masks[i] for i in live], x, step)
            for j, i in enumerate(live):
                outputs[i].append(h[j])
            live = [i for i in live if len(outputs[i]) < new_tokens[i]]
        return [np.stack(o) for o in outputs]


def sequential_generate(model: ToyModel, prompt: np.ndarray, new_tokens: int) -> np.ndarray:
    """Reference decoder: recompute the whole sequence from scratch for every token."""
    X = np.asarray(prompt, dtype=np.float64)
    out = []
    for _ in range(new_tokens):
        h = model.forward(X)[-1]
        out.append(h)
        X = np.vstack([X, next_input(h)[None]])
    return np.stack(out)
