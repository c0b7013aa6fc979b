"""Attention-entropy sensitivity and the conversion order derived from it."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import LayerKind, teacher_forward
from .distill.toy import ToyModel
from .errors import DomainError


@dataclass(frozen=True)
class LayerSensitivity:
    layer_index: int
    mean_entropy: float  # nats
    sample_count: int


def attention_entropy(row, atol: float = 1e-9) -> float:
    """Shannon entropy ``-sum p ln p`` of one attention row (``0 ln 0 = 0``)."""
    p = np.asarray(row, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DomainError("entropy needs a non-empty 1-d row")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("attention row has negative or non-finite entries")
    if abs(p.sum() - 1.0) > atol:
        raise DomainError(f"attention row sums to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(max(-np.sum(nz * np.log(nz)), 0.0))


def _layer_rows(model: ToyModel, layer_idx: int, X: np.ndarray, full_matrix: bool):
    layer = model.layers[layer_idx]
    if layer.kind is not LayerKind.TEACHER:
        raise DomainError(f"layer {layer_idx} is {layer.kind.value}; entropy needs softmax rows")
    h, _ = model.layer_io(X, layer_idx)
    A = teacher_forward(layer, h).attn[0]  # (heads, T, T)
    if full_matrix:
        return [A[hd, t, : t + 1] for hd in range(A.shape[0]) for t in range(A.shape[1])]
    return [A[hd, -1] for hd in range(A.shape[0])]


def layer_entropy(
    model: ToyModel,
    layer_idx: int,
    calibration: Sequence,
    full_matrix: bool = False,
) -> LayerSensitivity:
    """Mean final-query entropy of one teacher layer over sequences and heads.

    With ``full_matrix`` every causal row of every head is averaged instead of
    only the last one.
    """
    if len(calibration) == 0:
        raise DomainError("empty calibration set")
    values = []
    for X in calibration:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DomainError("calibration entries must be single (T, d) sequences")
        values.extend(attention_entropy(r) for r in _layer_rows(model, layer_idx, X, full_matrix))
    return LayerSensitivity(layer_idx, float(np.mean(values)), len(values))


def rank_layers(model: ToyModel, calibration: Sequence, full_matrix: bool = False) -> list[int]:
    """Layer indices by ascending attention entropy, ties to the lower index.

    Layers that are no longer softmax attention have no entropy; they are
    taken as already converted and placed first, in index order.
    """
    return [s.layer_index for s in sensitivity_report(model, calibration, full_matrix)]


def sensitivity_report(
    model: ToyModel, calibration: Sequence, full_matrix: bool = False
) -> list[LayerSensitivity]:
    """Per-layer sensitivities in conversion order (see :func:`rank_layers`)."""
    teacher = [i for i, p in enumerate(model.layers) if p.kind is LayerKind.TEACHER]
    if not teacher:
        raise DomainError("model has no teacher layer to rank")
    converted = [LayerSensitivity(i, 0.0, 0) for i, p in enumerate(model.layers) if p.kind is not LayerKind.TEACHER]
    scored = [layer_entropy(model, i, calibration, full_matrix) for i in teacher]
    scored.sort(key=lambda s: (s.mean_entropy, s.layer_index))
    return converted + scored


def ranking_csv(report: Sequence[LayerSensitivity]) -> str:
    """CSV text with columns ``layer, mean_entropy, rank``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "mean_entropy", "rank"])
    for rank, s in enumerate(report):
        w.writerow([s.layer_index, repr(s.mean_entropy), rank])
    return buf.getvalue()
