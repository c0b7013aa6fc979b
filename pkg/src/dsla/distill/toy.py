"""Toy residual attention stacks, layer banks and a planted long-range recall task."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..attention import LayerKind, LayerParams, layer_forward
from ..errors import DomainError, ShapeError

MARKER = 0  # feature set only on the first token of a sequence
CONSTANT = 1  # feature equal to one on every token


def nonlinearity(O: np.ndarray) -> np.ndarray:
    return np.tanh(O)


@dataclass
class ToyModel:
    """Stack of attention layers with ``h_{l+1} = h_l + tanh(layer_l(h_l))``."""

    layers: list[LayerParams]
    conversion_order: Optional[list[int]] = None
    frozen: Optional[list[bool]] = None

    def __post_init__(self):
        n = len(self.layers)
        if n < 1:
            raise ShapeError("a model needs at least one layer")
        if self.conversion_order is None:
            self.conversion_order = list(range(n))
        if sorted(self.conversion_order) != list(range(n)):
            raise DomainError(f"conversion order {self.conversion_order} is not a permutation")
        if self.frozen is None:
            self.frozen = [True] * n
        d = {p.d for p in self.layers}
        if len(d) != 1:
            raise ShapeError(f"layers disagree on model dimension: {sorted(d)}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.layers[0].d

    def kinds(self) -> list[LayerKind]:
        return [p.kind for p in self.layers]

    def hidden_states(self, X) -> list[np.ndarray]:
        """``[h_0, ..., h_n]`` where ``h_0 = X``."""
        h = [np.asarray(X, dtype=np.float64)]
        for p in self.layers:
            h.append(h[-1] + nonlinearity(layer_forward(p, h[-1])))
        return h

    def forward(self, X) -> np.ndarray:
        return self.hidden_states(X)[-1]

    def layer_io(self, X, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Input to layer ``index`` and that layer's attention output."""
        h = np.asarray(X, dtype=np.float64)
        for p in self.layers[:index]:
            h = h + nonlinearity(layer_forward(p, h))
        return h, layer_forward(self.layers[index], h)

    def with_layer(self, index: int, layer: LayerParams) -> "ToyModel":
        layers = list(self.layers)
        layers[index] = layer
        return ToyModel(layers, list(self.conversion_order), list(self.frozen))

    def unfreeze_only(self, index: int) -> "ToyModel":
        frozen = [i != index for i in range(self.n_layers)]
        return ToyModel(list(self.layers), list(self.conversion_order), frozen)


@dataclass
class LayerBank:
    """Original teacher layers plus the DSLA substitutes trained so far.

    A bank describes a whole family of partially converted models: converting
    the first ``k`` entries of ``order`` gives the ``k``-th member.
    """

    teacher: list[LayerParams]
    order: list[int]
    substitutes: dict[int, LayerParams] = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.teacher))):
            raise DomainError(f"order {self.order} is not a permutation")

    @property
    def n_layers(self) -> int:
        return len(self.teacher)

    @property
    def max_conversions(self) -> int:
        k = 0
        while k < len(self.order) and self.order[k] in self.substitutes:
            k += 1
        return k

    def mask(self, k: int) -> list[bool]:
        """Per-layer flag: True where layer runs as DSLA with ``k`` conversions."""
        conv = set(self.order[:k])
        return [i in conv for i in range(self.n_layers)]

    def layers_for(self, k: int) -> list[LayerParams]:
        if k > self.max_conversions:
            raise DomainError(f"bank holds {self.max_conversions} trained conversions, {k} requested")
        conv = self.mask(k)
        return [self.substitutes[i] if conv[i] else self.teacher[i] for i in range(self.n_layers)]

    def model(self, k: int) -> ToyModel:
        return ToyModel(self.layers_for(k), list(self.order))

    def reference(self) -> ToyModel:
        return ToyModel(list(self.teacher), list(self.order))


def recall_dataset(n: int, T: int, d: int, rng: np.random.Generator, noise: float = 0.5) -> np.ndarray:
    """Sequences whose first token carries a marker and a payload.

    Feature 0 marks the first token, feature 1 is a constant one, and the
    remaining features are noise on later tokens and a unit-scale payload on
    the first.  A recall head reading the first token from every position
    makes late outputs depend on the start of the sequence.
    """
    if d < 4:
        raise ShapeError("recall task needs at least 4 features")
    X = rng.normal(0.0, noise, (n, T, d))
    X[:, :, MARKER] = 0.0
    X[:, :, CONSTANT] = 1.0
    X[:, 0, MARKER] = 1.0
    X[:, 0, 2:] = rng.normal(0.0, 1.0, (n, d - 2))
    return X


def _dense(rng, d, scale):
    return rng.normal(0.0, scale / np.sqrt(d), (d, d))


def recall_layer(d: int, heads: int, rng: np.random.Generator, strength: float = 8.0) -> LayerParams:
    """Teacher layer whose heads put nearly all mass on the first token.

    Keys pick up the marker feature and queries the constant feature, so the
    first-token logit exceeds the others by about ``strength``.
    """
    dh = d // heads
    c = np.sqrt(strength / np.sqrt(dh))
    W_q = _dense(rng, d, 0.1)
    W_k = _dense(rng, d, 0.1)
    W_q[CONSTANT, :] = c
    W_q[MARKER, :] = 0.0
    W_k[MARKER, :] = c
    W_k[CONSTANT, :] = 0.0
    return LayerParams(LayerKind.TEACHER, W_q, W_k, _dense(rng, d, 1.0), _dense(rng, d, 1.0), heads=heads)


def diffuse_layer(d: int, heads: int, rng: np.random.Generator, qk_scale: float = 0.3) -> LayerParams:
    """Teacher layer with small query/key weights, hence broad attention."""
    return LayerParams(
        LayerKind.TEACHER,
        _dense(rng, d, qk_scale),
        _dense(rng, d, qk_scale),
        _dense(rng, d, 1.0),
        _dense(rng, d, 1.0),
        heads=heads,
    )


def uniform_layer(d: int, heads: int, rng: np.random.Generator) -> LayerParams:
    """Teacher layer with exactly uniform causal rows over token-constant values.

    Keys and values come only from the constant feature, so every key is the
    same vector (all logits in a row tie) and every value is the same vector.
    The output is then constant over positions, which a DSLA layer can match
    with a fast-decaying state.  Queries stay non-zero, keeping a student
    initialised from these weights away from the ``q = k = 0`` saddle.
    """
    W_k = np.zeros((d, d))
    W_k[CONSTANT, :] = 1.0
    W_v = np.zeros((d, d))
    W_v[CONSTANT, :] = rng.normal(0.0, 1.0, d)
    return LayerParams(
        LayerKind.TEACHER, _dense(rng, d, 1.0), W_k, W_v, _dense(rng, d, 1.0), heads=heads
    )


def toy_teacher(
    d: int = 16,
    heads: int = 2,
    n_layers: int = 2,
    seed: int = 0,
    recall_layers: Sequence[int] = (0,),
) -> ToyModel:
    """Seeded teacher: recall heads at ``recall_layers``, diffuse heads elsewhere."""
    rng = np.random.default_rng(seed)
    layers = [
        recall_layer(d, heads, rng) if i in recall_layers else diffuse_layer(d, heads, rng)
        for i in range(n_layers)
    ]
    return ToyModel(layers)
