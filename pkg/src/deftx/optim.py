"""
Optim

AdamW (or plain SGD) with a linear learning-rate decay, decoupled L1
soft-thresholding, and the two training loops built on it: dense fine-tuning
of every unfrozen tensor and sparse fine-tuning restricted to a BinaryMask.

An update plan maps a tensor name to either None (dense update) or a sorted
flat-index array (masked update). Tensors missing from the plan are frozen.
Optimizer moments only exist for planned coordinates, which is the same as
masking gradients before AdamW.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Collection, Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from sklearn.metrics import accuracy_score, f1_score

from .core.errors import ConfigError, DeftWarning, IncompatibleError, TrainingFailure
from .core.models import (
    L1Anchor,
    Objective,
    OptimizerKind,
    SelectionMetric,
    TensorClass,
    TrainConfig,
    TrainRecord,
    VectorKind,
    VectorMetadata,
)
from .data.batching import ExampleSet, eval_batches, iterate_train_batches
from .loggers.train_logger import TrainLogger
from .model.batch import IGNORE_INDEX
from .model.encoder import forward_loss, loss_and_grad, predict
from .model.params import HEAD_PREFIX, GradientSet, ParameterSet
from .numerics import Tensor, make_rng
from .vectors import BinaryMask, SparseVector

logger = logging.getLogger(__name__)

UpdatePlan = Dict[str, Optional[NDArray[np.int64]]]
FreezeSet = FrozenSet[str]


@dataclass(frozen=True)
class TrainingData:
    """Training rows plus the held-out rows used for checkpoint selection"""
    train: ExampleSet
    validation: Optional[ExampleSet]
    vocab_size: int

    @classmethod
    def from_examples(
        cls, examples: ExampleSet, vocab_size: int, holdout_fraction: float, seed: int
    ) -> "TrainingData":
        train, held = examples.split(holdout_fraction, make_rng(seed, "holdout"))
        return cls(train=train, validation=held if len(held) else None, vocab_size=vocab_size)


@dataclass
class AdamWState:
    """First and second moments for every planned coordinate"""
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ParameterSet, plan: UpdatePlan) -> "AdamWState":
        state = cls()
        for name, idx in plan.items():
            size = params[name].size if idx is None else idx.size
            state.m[name] = np.zeros(size)
            state.v[name] = np.zeros(size)
        return state


@dataclass
class TrainResult:
    params: ParameterSet
    best_step: int
    best_metric: Optional[float]
    history: List[TrainRecord] = field(default_factory=list)


# --- UPDATE PLANS ---

def check_freeze(params: ParameterSet, freeze: Iterable[str]) -> FreezeSet:
    frozen = frozenset(freeze)
    unknown = sorted(frozen - set(params.names()))
    if unknown:
        raise IncompatibleError(f"freeze set names unknown tensors: {unknown[:5]}")
    return frozen


def irrelevant_names(params: ParameterSet, objective: Objective) -> List[str]:
    """Tensors the objective's loss never reads: the classification head for
    MLM, the MLM decoder for classification."""
    if Objective(objective) == Objective.MLM:
        return params.names_of(TensorClass.HEAD)
    return [n for n in params.names() if n.startswith("mlm.")]


def trainable_names(params: ParameterSet, objective: Objective, freeze: Collection[str] = ()) -> List[str]:
    """Non-head tensors a run may update; these are also the mask-eligible tensors."""
    skip = set(freeze) | set(irrelevant_names(params, objective)) | set(params.names_of(TensorClass.HEAD))
    return [n for n in params.names() if n not in skip]


def dense_plan(names: Iterable[str]) -> UpdatePlan:
    return {name: None for name in names}


def masked_plan(mask: BinaryMask, dense: Iterable[str] = ()) -> UpdatePlan:
    plan: UpdatePlan = {name: idx for name, idx in mask.nonempty()}
    plan.update(dense_plan(dense))
    return plan


# --- SINGLE STEP ---

def _soft_threshold(x: Tensor, threshold: float) -> Tensor:
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def adamw_step(
    params: ParameterSet,
    grads: GradientSet,
    state: AdamWState,
    step_index: int,
    lr_t: float,
    cfg: TrainConfig,
    plan: UpdatePlan,
    anchor: Optional[ParameterSet] = None,
) -> Tuple[ParameterSet, AdamWState]:
    """
    One optimizer step on the planned coordinates, in place.

    `step_index` counts completed steps (bias correction uses step_index + 1).
    With cfg.optimizer == sgd the moments are left alone and the update is
    plain `p - lr_t * g`. Weight decay is decoupled and applied before the
    gradient update; L1 soft-thresholds the displacement from `anchor`
    (zero when anchor is None).
    """
    t = step_index + 1
    for name, idx in plan.items():
        g_full = grads[name].reshape(-1)
        g = g_full if idx is None else g_full[idx]
        if not np.all(np.isfinite(g)):
            raise TrainingFailure(f"non-finite gradient in {name!r}", step=t)

        flat = params[name].reshape(-1).copy()
        p = flat if idx is None else flat[idx]

        if cfg.weight_decay > 0.0:
            p = p * (1.0 - lr_t * cfg.weight_decay)

        if cfg.optimizer == OptimizerKind.SGD:
            p = p - lr_t * g
        else:
            m = state.m[name]
            v = state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p = p - lr_t * (m_hat / (np.sqrt(v_hat) + cfg.eps))

        if cfg.l1_lambda > 0.0 and lr_t > 0.0:
            a_full = None if anchor is None else anchor[name].reshape(-1)
            if a_full is None:
                p = _soft_threshold(p, lr_t * cfg.l1_lambda)
            else:
                a = a_full if idx is None else a_full[idx]
                p = a + _soft_threshold(p - a, lr_t * cfg.l1_lambda)

        if idx is None:
            flat = p
        else:
            flat[idx] = p
        params[name] = flat.reshape(params[name].shape)
    return params, state


# --- EVALUATION ---

def score_predictions(y_true: NDArray[np.int64], y_pred: NDArray[np.int64], metric: str, n_classes: int) -> float:
    """accuracy or macro-F1 (per-class F1 with zero division counted as 0)"""
    if metric == "accuracy":
        return float(accuracy_score(y_true, y_pred))
    if metric in ("f1", "macro_f1"):
        return float(
            f1_score(y_true, y_pred, labels=list(range(n_classes)), average="macro", zero_division=0)
        )
    raise ConfigError(f"unknown metric {metric!r}")


def _higher_is_better(metric: SelectionMetric) -> bool:
    return metric != SelectionMetric.VAL_LOSS


def _evaluate(params: ParameterSet, batches: list, objective: Objective, metric: SelectionMetric) -> float:
    if metric == SelectionMetric.VAL_LOSS:
        total, count = 0.0, 0
        for batch in batches:
            labels = batch.mlm_labels if objective == Objective.MLM else batch.class_labels
            n = int(np.sum(labels != IGNORE_INDEX))
            if n == 0:
                continue
            total += forward_loss(params, batch, objective).loss * n
            count += n
        return total / count if count else float("inf")

    y_true = np.concatenate([b.class_labels for b in batches])
    y_pred = np.concatenate([np.argmax(predict(params, b), axis=1) for b in batches])
    return score_predictions(y_true, y_pred, metric.value, params.spec.n_classes)


# --- TRAINING LOOP ---

def train(
    params0: ParameterSet,
    data: TrainingData,
    objective: Objective,
    cfg: TrainConfig,
    plan: UpdatePlan,
    train_logger: Optional[TrainLogger] = None,
    phase: str = "",
) -> TrainResult:
    """
    Runs cfg.total_steps() optimizer steps on the planned coordinates and
    returns the best evaluated checkpoint. Evaluation happens every
    eval_interval steps and after the last step.
    """
    objective = Objective(objective)
    if objective == Objective.MLM and cfg.selection_metric != SelectionMetric.VAL_LOSS:
        raise ConfigError("MLM runs select checkpoints by val_loss")
    if len(data.train) == 0:
        raise ConfigError("training data is empty")

    params = params0.copy()
    total = cfg.total_steps(len(data.train))
    if total == 0 or not plan:
        return TrainResult(params=params, best_step=0, best_metric=None)

    train_logger = train_logger or TrainLogger(phase=phase)
    anchor = params0 if cfg.l1_anchor == L1Anchor.INITIAL else None
    state = AdamWState.zeros(params, plan)
    batches = iterate_train_batches(
        data.train, cfg.batch_size, objective, make_rng(cfg.seed, "batches", phase), data.vocab_size, cfg.mlm_probability
    )
    held = data.validation if data.validation is not None else data.train
    val_batches = eval_batches(
        held, cfg.batch_size, objective, make_rng(cfg.seed, "validation", phase), data.vocab_size, cfg.mlm_probability
    )
    higher = _higher_is_better(cfg.selection_metric)

    best: Optional[ParameterSet] = None
    best_step, best_metric = 0, None
    for step_index in range(total):
        batch = next(batches)
        loss, grads = loss_and_grad(params, batch, objective)
        if not np.isfinite(loss):
            raise TrainingFailure("non-finite training loss", step=step_index + 1)
        lr_t = cfg.lr_at(step_index, total)
        adamw_step(params, grads, state, step_index, lr_t, cfg, plan, anchor)

        step = step_index + 1
        metric = None
        if step % cfg.eval_interval == 0 or step == total:
            metric = _evaluate(params, val_batches, objective, cfg.selection_metric)
            improved = np.isfinite(metric) and (
                best_metric is None or (metric > best_metric if higher else metric < best_metric)
            )
            if improved:
                best, best_step, best_metric = params.copy(), step, metric
        train_logger.log(step=step, lr=lr_t, train_loss=loss, eval_metric=metric)

    if best is None:
        logger.warning("%s: no finite %s in %d steps, keeping the last step", phase or "training", cfg.selection_metric.value, total)
        best, best_step = params, total
    else:
        logger.info(
            "%s: %d steps, best %s=%.4f at step %d",
            phase or "training", total, cfg.selection_metric.value, best_metric, best_step,
        )
    return TrainResult(params=best, best_step=best_step, best_metric=best_metric, history=list(train_logger.records))


def full_finetune(
    theta0: ParameterSet,
    data: TrainingData,
    objective: Objective,
    cfg: TrainConfig,
    freeze: Collection[str] = (),
    train_logger: Optional[TrainLogger] = None,
) -> ParameterSet:
    """Dense fine-tuning of every unfrozen tensor the objective uses (head included)."""
    frozen = check_freeze(theta0, freeze)
    names = trainable_names(theta0, objective, frozen)
    if Objective(objective) == Objective.CLASSIFY:
        names += [n for n in theta0.names_of(TensorClass.HEAD) if n not in frozen]
    result = train(theta0, data, objective, cfg, dense_plan(names), train_logger, phase="full")
    return result.params


def sparse_train(
    theta0: ParameterSet,
    mask: BinaryMask,
    data: TrainingData,
    objective: Objective,
    cfg: TrainConfig,
    freeze: Collection[str] = (),
    dense: Collection[str] = (),
    train_logger: Optional[TrainLogger] = None,
    metadata: Optional[VectorMetadata] = None,
) -> Tuple[SparseVector, TrainResult]:
    """
    Mask-constrained fine-tuning. `dense` names tensors trained without a
    mask (the classification head); they are not part of the vector.
    Returns phi = theta2 - theta0 on the mask support and the raw result.
    """
    mask.check_compatible(theta0)
    frozen = check_freeze(theta0, freeze)
    touched = [name for name, _ in mask.nonempty() if name in frozen or name.startswith(HEAD_PREFIX)]
    if touched:
        raise IncompatibleError(f"mask selects coordinates of frozen or head tensors: {touched[:5]}")
    metadata = metadata or VectorMetadata(kind=VectorKind.TASK if objective == Objective.CLASSIFY else VectorKind.LANGUAGE)

    if mask.k == 0 and cfg.total_steps(len(data.train)) > 0:
        message = "sparse fine-tuning with an empty mask; the vector stays zero"
        logger.warning(message)
        warnings.warn(message, DeftWarning, stacklevel=2)

    result = train(theta0, data, objective, cfg, masked_plan(mask, dense), train_logger, phase="sparse")
    phi = SparseVector.from_difference(result.params, theta0, mask, metadata)
    return phi, result


def sparse_finetune(
    theta0: ParameterSet,
    mask: BinaryMask,
    data: TrainingData,
    objective: Objective,
    cfg: TrainConfig,
    freeze: Collection[str] = (),
    train_logger: Optional[TrainLogger] = None,
) -> SparseVector:
    phi, _ = sparse_train(theta0, mask, data, objective, cfg, freeze, train_logger=train_logger)
    return phi
