"""Layer-wise distillation of teacher layers into DSLA layers, isolated or chained."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..attention import LayerKind, LayerParams, forward_sequence, init_gate, layer_forward
from ..errors import DomainError, ShapeError
from .losses import LOSS_MODES, backward, contrastive_loss, distill_loss, layer_loss
from .optim import OptimizerState, Schedule, optimizer_step
from .toy import LayerBank, ToyModel

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "l_dist", "l_cont", "total", "lr")


@dataclass(frozen=True)
class FinetuneConfig:
    """Per-layer training recipe.

    Learning rates default to toy-scale values: a 1e-4 peak barely moves a
    16-dim layer in a few hundred steps, and a high floor leaves Adam noise
    above the 1e-3 loss level.  Warmup fraction, cosine shape and weight
    decay follow the large-scale recipe.
    """

    max_steps: int = 800
    batch_size: int = 16
    lam: float = 0.1
    loss: str = "kl"
    peak_lr: float = 3e-2
    floor_lr: float = 1e-4
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    window: int = 50
    tol: float = 1e-4
    seed: int = 0
    history_bias: float = 4.0
    gate_std: float = 0.02
    gamma_init: float = 0.5

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise DomainError(f"unknown loss {self.loss!r}")
        if self.lam < 0:
            raise DomainError("lambda must be non-negative")
        if self.max_steps < 1 or self.batch_size < 1 or self.window < 1:
            raise DomainError("max_steps, batch_size and window must be positive")


@dataclass
class FinetuneResult:
    layer_index: int
    layer: LayerParams
    history: list[dict] = field(default_factory=list)
    converged: bool = False

    @property
    def steps(self) -> int:
        return len(self.history)

    @property
    def final(self) -> dict:
        return self.history[-1]


def dsla_from_teacher(teacher: LayerParams, rng: np.random.Generator, config: FinetuneConfig) -> LayerParams:
    """DSLA layer reusing the teacher's projections; history gate starts near all-ones."""
    if teacher.kind is not LayerKind.TEACHER:
        raise DomainError("can only convert a teacher layer")
    d = teacher.d
    return LayerParams(
        LayerKind.DSLA,
        teacher.W_q.copy(),
        teacher.W_k.copy(),
        teacher.W_v.copy(),
        teacher.W_o.copy(),
        heads=teacher.heads,
        gate1=init_gate(d, rng, bias=config.history_bias, std=config.gate_std),
        gate2=init_gate(d, rng, bias=0.0, std=config.gate_std),
        gamma=config.gamma_init,
    )


def _plateaued(evals: list[float], tol: float) -> bool:
    if len(evals) < 2:
        return False
    prev, last = evals[-2], evals[-1]
    # a rise is instability at the current step size, not a plateau
    return 0.0 <= (prev - last) / max(abs(prev), 1e-300) < tol


def train_layer(
    layer: LayerParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: FinetuneConfig,
    rng: np.random.Generator,
) -> tuple[LayerParams, list[dict], bool]:
    """Minibatch AdamW on one DSLA layer against fixed per-token targets.

    Every ``config.window`` steps the loss over the whole training set is
    re-evaluated; training stops once it improved by less than
    ``config.tol`` (relative) since the previous evaluation.
    """
    n = inputs.shape[0]
    state = OptimizerState(
        Schedule(config.max_steps, config.warmup_fraction, config.peak_lr, config.floor_lr),
        weight_decay=config.weight_decay,
    )
    params = dict(layer.arrays())
    params["gamma_logit"] = np.asarray(layer.gamma_logit)
    history: list[dict] = []
    evals: list[float] = []
    order = rng.permutation(n)
    cursor = 0
    converged = False
    for step in range(config.max_steps):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        loss, grads = backward(layer, inputs[idx], targets[idx], config.lam, config.loss)
        params, state, lr = optimizer_step(params, grads, state)
        layer = layer.with_arrays(params).with_gamma_logit(float(params["gamma_logit"]))
        history.append(
            {"step": step, "l_dist": loss.l_dist, "l_cont": loss.l_cont, "total": loss.total, "lr": lr}
        )
        if (step + 1) % config.window == 0:
            evals.append(layer_loss(layer, inputs, targets, config.lam, config.loss).total)
            if _plateaued(evals, config.tol):
                converged = True
                break
    if not converged:
        log.info("layer training hit the %d-step cap without plateauing", config.max_steps)
    return layer, history, converged


def _check_dataset(dataset) -> np.ndarray:
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] == 0:
        raise DomainError("empty dataset" if X.size == 0 else f"dataset must be (N, T, d), got {X.shape}")
    return X


def finetune_layer(
    model: ToyModel,
    layer_idx: int,
    dataset,
    config: FinetuneConfig = FinetuneConfig(),
    reference: Optional[ToyModel] = None,
) -> tuple[ToyModel, FinetuneResult]:
    """Replace teacher layer ``layer_idx`` by a DSLA layer and train only that layer.

    Inputs to the layer come from ``model`` as it currently stands (earlier
    conversions included).  Targets are the teacher layer's outputs on the
    ``reference`` model's own hidden states, i.e. what the original stack
    computed there.  Every other layer is left untouched.
    """
    X = _check_dataset(dataset)
    if X.shape[-1] != model.d:
        raise ShapeError(f"dataset dimension {X.shape[-1]} does not match model dimension {model.d}")
    teacher = model.layers[layer_idx]
    if teacher.kind is not LayerKind.TEACHER:
        raise DomainError(f"layer {layer_idx} is already {teacher.kind.value}")
    reference = model if reference is None else reference
    work = model.unfreeze_only(layer_idx)

    inputs, _ = work.layer_io(X, layer_idx)
    ref_in, _ = reference.layer_io(X, layer_idx)
    targets = layer_forward(reference.layers[layer_idx], ref_in)

    rng = np.random.default_rng([config.seed, layer_idx])
    student = dsla_from_teacher(teacher, rng, config)
    trained, history, converged = train_layer(student, inputs, targets, config, rng)
    out = work.with_layer(layer_idx, trained)
    out.frozen = [True] * out.n_layers
    return out, FinetuneResult(layer_idx, trained, history, converged)


@dataclass
class StageCheckpoint:
    stage: int
    bank: LayerBank
    result: FinetuneResult

    @property
    def conversion_mask(self) -> list[bool]:
        return self.bank.mask(self.stage + 1)

    def model(self) -> ToyModel:
        return self.bank.model(self.stage + 1)


def chained_finetune(
    model: ToyModel,
    order: Sequence[int],
    dataset,
    config: FinetuneConfig = FinetuneConfig(),
) -> list[StageCheckpoint]:
    """Convert layers one at a time in ``order``, committing each before the next.

    Stage ``k`` trains layer ``order[k]`` inside a model where
    ``order[:k]`` already run as their committed DSLA layers.  Returns one
    checkpoint per stage; checkpoint ``k`` can serve any prefix ``j <= k+1``.
    """
    order = list(order)
    if sorted(order) != list(range(model.n_layers)):
        raise DomainError(f"order {order} is not a permutation of the model's layers")
    if any(p.kind is not LayerKind.TEACHER for p in model.layers):
        raise DomainError("chained fine-tuning starts from an all-teacher model")
    reference = ToyModel(list(model.layers), order)
    current = ToyModel(list(model.layers), order)
    bank = LayerBank(list(model.layers), order)
    stages = []
    for k, idx in enumerate(order):
        current, result = finetune_layer(current, idx, dataset, config, reference=reference)
        bank = LayerBank(bank.teacher, order, {**bank.substitutes, idx: result.layer})
        stages.append(StageCheckpoint(k, copy.deepcopy(bank), result))
    return stages


def independent_finetune(
    model: ToyModel,
    order: Sequence[int],
    dataset,
    config: FinetuneConfig = FinetuneConfig(),
) -> LayerBank:
    """Train every substitute against the all-teacher stack, then assemble them."""
    order = list(order)
    reference = ToyModel(list(model.layers), order)
    subs = {}
    for idx in order:
        _, result = finetune_layer(reference, idx, dataset, config, reference=reference)
        subs[idx] = result.layer
    return LayerBank(list(model.layers), order, subs)


def heldout_l_dist(candidate: ToyModel, reference: ToyModel, X, mode: str = "kl") -> float:
    """Divergence between the final hidden states of two stacks on ``X``."""
    return distill_loss(candidate.forward(X), reference.forward(X), mode)


def layer_l_dist(layer: LayerParams, inputs, targets, mode: str = "kl") -> float:
    return distill_loss(layer_forward(layer, inputs), targets, mode)


def gate_similarity(layer: LayerParams, X) -> float:
    """Mean cosine similarity of the two gates over every token of ``X``."""
    tr = forward_sequence(layer, X)
    d = layer.d
    return contrastive_loss(tr.gates1().reshape(-1, d, d), tr.gates2().reshape(-1, d, d))

