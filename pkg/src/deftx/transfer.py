"""
Transfer

Arithmetic composition of sparse vectors and the zero-shot cross-lingual
pipeline: a task vector trained on the source language is added, together
with the target language's vector, to the base model.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core.errors import DeftWarning, EvaluationError
from .core.models import AblationVariant, DenoiseConfig, Method, Objective, SelectionMetric, TensorClass, TrainConfig
from .core.provenance import digest_model
from .data.batching import ExampleSet
from .deft import Composable, SftResult, ablation, deftx, lt_sft
from .loggers.train_logger import TrainLogger
from .model.batch import Batch
from .model.encoder import predict
from .model.params import ParameterSet
from .numerics import Tensor
from .optim import TrainingData, score_predictions
from .vectors import SparseVector

logger = logging.getLogger(__name__)


# --- COMPOSITION ---

def _digest(vector: Composable) -> str:
    return vector.digest()


def _check_vector(theta0: ParameterSet, vector: Composable) -> None:
    vector.check_compatible(theta0)
    if isinstance(vector, SparseVector) and vector.metadata.spec_digest and theta0.spec is not None:
        if vector.metadata.spec_digest != digest_model(theta0.spec):
            message = f"vector {vector.metadata.label or vector.digest()[:12]} was trained on a different model spec"
            logger.warning(message)
            warnings.warn(message, DeftWarning, stacklevel=3)


def compose(theta0: ParameterSet, vectors: Sequence[Composable]) -> ParameterSet:
    """
    theta0 + sum(vectors). The vectors are summed first (in digest order
    when there are more than two) and the sum is added once, so the result
    does not depend on the order of `vectors`.
    """
    if not vectors:
        return theta0.copy()
    for vector in vectors:
        _check_vector(theta0, vector)

    ordered = sorted(vectors, key=_digest) if len(vectors) > 2 else list(vectors)
    total = {name: np.zeros(t.size) for name, t in theta0.items()}
    for vector in ordered:
        if isinstance(vector, SparseVector):
            for name, idx, values in vector.nonempty():
                total[name][idx] += values
        else:
            for name, tensor in vector.items():
                total[name] += tensor.reshape(-1)
    return theta0.map(lambda n, t: t + total[n].reshape(t.shape))


@dataclass
class ComposedModel:
    """Base parameters plus applied vectors and the task's classification head"""
    base: ParameterSet
    applied: List[Composable] = field(default_factory=list)
    head: Optional[ParameterSet] = None
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for vector in self.applied:
            vector.check_compatible(self.base)
        self._materialized: Optional[ParameterSet] = None

    def materialize(self) -> ParameterSet:
        if self._materialized is None:
            params = compose(self.base, self.applied)
            if self.head is not None:
                params = params.with_fragment(self.head)
            self._materialized = params
        return self._materialized

    def predict(self, batch: Batch) -> Tensor:
        return predict(self.materialize(), batch)


# --- VECTOR TRAINING ---

def _run(
    method: Method,
    variant: AblationVariant,
    data: TrainingData,
    objective: Objective,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    freeze: Sequence[str],
    workers: int,
    train_logger: Optional[TrainLogger],
    label: str,
) -> SftResult:
    if AblationVariant(variant) != AblationVariant.NONE:
        return ablation(variant, data, objective, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger, label)
    if Method(method) == Method.LT_SFT:
        return lt_sft(data, objective, theta0, cfg, k, freeze, train_logger, label)
    return deftx(data, objective, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger, label)


def train_language_vector(
    corpus: TrainingData,
    theta0: ParameterSet,
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    method: Method = Method.DEFTX,
    workers: int = 1,
    train_logger: Optional[TrainLogger] = None,
    label: str = "",
    variant: AblationVariant = AblationVariant.NONE,
) -> SftResult:
    """MLM vector for one language; layer-norm tensors stay frozen."""
    if cfg.selection_metric != SelectionMetric.VAL_LOSS:
        cfg = cfg.model_copy(update={"selection_metric": SelectionMetric.VAL_LOSS})
    freeze = theta0.names_of(TensorClass.LAYER_NORM)
    return _run(
        method, variant, corpus, Objective.MLM, theta0, cfg, k, denoise_cfg, freeze, workers, train_logger, label
    )


def train_task_vector(
    task_data: TrainingData,
    theta0: ParameterSet,
    phi_src: Optional[Composable],
    cfg: TrainConfig,
    k: int,
    denoise_cfg: DenoiseConfig,
    method: Method = Method.DEFTX,
    workers: int = 1,
    train_logger: Optional[TrainLogger] = None,
    label: str = "",
    variant: AblationVariant = AblationVariant.NONE,
) -> SftResult:
    """
    Task vector trained from theta0 + phi_src (or theta0 without a source
    vector). The returned vector is relative to that starting point.
    """
    start = compose(theta0, [phi_src]) if phi_src is not None else theta0
    result = _run(
        method, variant, task_data, Objective.CLASSIFY, start, cfg, k, denoise_cfg, (), workers, train_logger, label
    )
    if phi_src is not None:
        result.parents.append(phi_src.digest())
        if isinstance(result.vector, SparseVector):
            result.vector.metadata.parents.append(phi_src.digest())
    return result


def zero_shot_eval(composed: ComposedModel, test: ExampleSet, metric: str = "accuracy", batch_size: int = 64) -> float:
    """accuracy or macro_f1 of the composed classifier on a labelled set"""
    if len(test) == 0 or test.labels is None:
        raise EvaluationError("zero-shot evaluation needs a non-empty labelled test set")
    params = composed.materialize()
    preds = []
    for start in range(0, len(test), batch_size):
        rows = test.subset(np.arange(start, min(start + batch_size, len(test))))
        batch = Batch(token_ids=rows.token_ids, attention_mask=rows.attention_mask)
        preds.append(np.argmax(predict(params, batch), axis=1))
    return score_predictions(test.labels, np.concatenate(preds), metric, params.spec.n_classes)


# --- PIPELINE ---

@dataclass
class CrossLingualResult:
    composed: ComposedModel
    source: SftResult
    task: SftResult
    target: SftResult


def cross_lingual(
    source_corpus: TrainingData,
    task_data: TrainingData,
    target_corpus: TrainingData,
    theta0: ParameterSet,
    language_cfg: TrainConfig,
    task_cfg: TrainConfig,
    k_language: int,
    k_task: int,
    language_denoise: DenoiseConfig,
    task_denoise: DenoiseConfig,
    method: Method = Method.DEFTX,
    workers: int = 1,
    train_logger: Optional[TrainLogger] = None,
) -> CrossLingualResult:
    """
    Source language vector, then the task vector on top of it, then the
    target language vector; returns theta0 + task + target with the head.
    """
    child = (lambda phase: train_logger.child(phase)) if train_logger else (lambda phase: None)
    source = train_language_vector(
        source_corpus, theta0, language_cfg, k_language, language_denoise, method, workers, child("source"), "source"
    )
    task = train_task_vector(
        task_data, theta0, source.phi, task_cfg, k_task, task_denoise, method, workers, child("task"), "task"
    )
    target = train_language_vector(
        target_corpus, theta0, language_cfg, k_language, language_denoise, method, workers, child("target"), "target"
    )
    composed = ComposedModel(
        base=theta0,
        applied=[task.vector, target.vector],
        head=task.head,
        provenance=[source.phi.digest(), task.vector.digest(), target.vector.digest()],
    )
    return CrossLingualResult(composed=composed, source=source, task=task, target=target)
