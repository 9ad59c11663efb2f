"""
Core - Models

Pydantic models for model specs, hyperparameters, vector metadata and run
records.
"""

import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError


class TensorClass(str, Enum):
    """Class tag carried by every tensor of a ParameterSet"""
    WEIGHT = "weight-matrix"
    BIAS = "bias"
    LAYER_NORM = "layer-norm"
    EMBEDDING = "embedding"
    HEAD = "head"


class Objective(str, Enum):
    MLM = "mlm"
    CLASSIFY = "classify"


class SelectionMetric(str, Enum):
    VAL_LOSS = "val_loss"
    ACCURACY = "accuracy"
    F1 = "f1"


class OptimizerKind(str, Enum):
    ADAMW = "adamw"
    SGD = "sgd"


class L1Anchor(str, Enum):
    INITIAL = "initial"
    ZERO = "zero"


class VectorKind(str, Enum):
    LANGUAGE = "language"
    TASK = "task"


class Method(str, Enum):
    DEFTX = "deftx"
    LT_SFT = "lt-sft"


class AblationVariant(str, Enum):
    NONE = "none"
    NO_HIGHER_ORDER = "no_higher_order"
    NO_PRUNE_NO_SFT = "no_prune_no_sft"
    NO_SFT = "no_sft"


class VarianceMeasure(str, Enum):
    SQUARED = "squared"
    LINEAR = "linear"


class ModelSpec(BaseModel):
    """Architecture of the toy encoder"""
    model_config = ConfigDict(frozen=True)

    vocab_size: int = Field(default=64, ge=1)
    d_model: int = Field(default=32, ge=1)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=64, ge=1)
    max_seq_len: int = Field(default=24, ge=1)
    n_classes: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelSpec":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class TrainConfig(BaseModel):
    """
    Hyperparameters of one fine-tuning phase.

    L1 shrinks the displacement from the starting point by default
    (l1_anchor=initial); l1_anchor=zero shrinks the raw weights instead.
    """
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=5e-5, ge=0.0)
    max_steps: int = Field(default=2000, ge=0)
    min_steps: int = Field(default=0, ge=0)
    max_epochs: Optional[float] = Field(default=None, gt=0)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    l1_lambda: float = Field(default=0.0, ge=0.0)
    l1_anchor: L1Anchor = L1Anchor.INITIAL
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    eval_interval: int = Field(default=100, ge=1)
    selection_metric: SelectionMetric = SelectionMetric.VAL_LOSS
    mlm_probability: float = Field(default=0.15, ge=0.0, le=1.0)

    def total_steps(self, n_train: int) -> int:
        """Lesser of max_epochs epochs or max_steps, but never below min_steps."""
        steps = self.max_steps
        if self.max_epochs is not None and n_train > 0:
            per_epoch = math.ceil(n_train / self.batch_size)
            steps = min(steps, int(math.ceil(self.max_epochs * per_epoch)))
        return max(steps, self.min_steps)

    def lr_at(self, step_index: int, total: int) -> float:
        """Linear decay; step_index counts completed steps, lr_at(total) == 0."""
        if total <= 0:
            return 0.0
        return self.lr * (total - step_index) / total


class RankPolicy(BaseModel):
    """Per-matrix rank rule: uniform integer rank or cumulative-variance fraction"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform", "variance"] = "variance"
    rank: Optional[int] = Field(default=None, ge=1)
    fraction: float = Field(default=0.9, gt=0.0, le=1.0)
    measure: VarianceMeasure = VarianceMeasure.SQUARED

    @model_validator(mode="after")
    def _rank_for_uniform(self) -> "RankPolicy":
        if self.kind == "uniform" and self.rank is None:
            raise ValueError("uniform rank policy needs a rank")
        return self

    @classmethod
    def uniform(cls, rank: int) -> "RankPolicy":
        return cls(kind="uniform", rank=rank)

    @classmethod
    def variance(cls, fraction: float = 0.9, measure: VarianceMeasure = VarianceMeasure.SQUARED) -> "RankPolicy":
        return cls(kind="variance", fraction=fraction, measure=measure)

    @classmethod
    def parse(cls, text: str) -> "RankPolicy":
        """
        Parses `100`, `var:0.9` or `var:0.9:linear`.
        """
        raw = text.strip().lower()
        try:
            if raw.startswith("var"):
                parts = raw.split(":")
                fraction = float(parts[1]) if len(parts) > 1 and parts[1] else 0.9
                measure = VarianceMeasure(parts[2]) if len(parts) > 2 else VarianceMeasure.SQUARED
                return cls.variance(fraction, measure)
            return cls.uniform(int(raw))
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"invalid rank policy {text!r}: expected e.g. '100' or 'var:0.9'") from exc

    def __str__(self) -> str:
        if self.kind == "uniform":
            return str(self.rank)
        suffix = "" if self.measure == VarianceMeasure.SQUARED else f":{self.measure.value}"
        return f"var:{self.fraction:g}{suffix}"


class DenoiseConfig(BaseModel):
    """Settings of the SVD denoising step"""
    model_config = ConfigDict(frozen=True)

    rank_policy: RankPolicy = Field(default_factory=RankPolicy.variance)
    residual_retain_fraction: float = Field(default=0.05, ge=0.0, le=1.0)
    denoise_classes: FrozenSet[TensorClass] = frozenset({TensorClass.WEIGHT, TensorClass.EMBEDDING})
    # Bias tensors always skip SVD and compete in the mask with raw values.
    bias_handling: Literal["direct-magnitude"] = "direct-magnitude"

    @field_validator("denoise_classes")
    @classmethod
    def _no_bias_svd(cls, value: FrozenSet[TensorClass]) -> FrozenSet[TensorClass]:
        if TensorClass.BIAS in value or TensorClass.HEAD in value:
            raise ValueError("bias and head tensors are never denoised")
        return value

    @property
    def enabled(self) -> bool:
        return bool(self.denoise_classes)

    @classmethod
    def disabled(cls) -> "DenoiseConfig":
        return cls(denoise_classes=frozenset())


class VectorMetadata(BaseModel):
    """Provenance carried by every sparse vector"""
    kind: VectorKind
    method: str = Method.DEFTX.value
    label: str = ""
    k: int = 0
    config_digest: str = ""
    spec_digest: str = ""
    rank_policy: Optional[str] = None
    parents: List[str] = Field(default_factory=list)


class TrainRecord(BaseModel):
    """One line of the training log"""
    step: int
    lr: float
    train_loss: float
    eval_metric: Optional[float] = None
    phase: str = ""
    run: str = ""


class RunManifest(BaseModel):
    """Everything needed to reproduce a CLI run"""
    run_id: str
    command: str
    created: datetime = Field(default_factory=datetime.now)
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    environment: Dict[str, Any] = Field(default_factory=dict)
