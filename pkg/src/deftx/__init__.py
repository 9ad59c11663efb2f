"""
deftx - SVD-denoised composable sparse fine-tuning

Language and task vectors for zero-shot cross-lingual transfer on a small
synthetic setup: full fine-tune, denoise the weight delta with a truncated
SVD plus the largest residual entries, keep the global top-k as a mask,
sparse fine-tune under it, and compose the resulting vectors by addition.

## Quick Start

```python
from deftx import ExperimentConfig, ExperimentRunner

runner = ExperimentRunner(ExperimentConfig())
theta0 = runner.pretrain()
for score in runner.transfer(theta0, ["bb", "cc"]):
    print(score.target, score.score)
```

Or from the shell:
```bash
deftx pretrain -o runs/theta0.dftx
deftx ablate --variant none --base runs/theta0.dftx
```

## Configuration

Process settings (`DeftConfig`) come from `DEFTX_*` environment variables
and CLI flags; experiment settings (`ExperimentConfig`) from a sectioned
`key = value` file, see README.md.
"""

# Config
from .config import DeftConfig, ExperimentConfig, LogLevel, SweepGrid, get_config, set_config

# Core Models
from .core import (
    AblationVariant,
    DenoiseConfig,
    Method,
    ModelSpec,
    Objective,
    RankPolicy,
    TrainConfig,
    VectorMetadata,
)
from .core.errors import DeftError, DeftWarning

# Model
from .model import ParameterSet, init_params, predict

# Vectors
from .vectors import BinaryMask, SparseVector

# Training
from .optim import TrainingData, full_finetune, sparse_finetune, sparse_train

# Method
from .deft import (
    SftResult,
    ablation,
    compute_delta,
    deftx,
    denoise_delta,
    denoise_matrix,
    global_topk_mask,
    lt_sft,
    select_rank,
)

# Transfer
from .transfer import ComposedModel, compose, cross_lingual, train_language_vector, train_task_vector, zero_shot_eval

# Analysis
from .analysis import jaccard, mask_overlap, overlap_matrix, sparsity_report

# Runner
from .runner import ExperimentRunner

__all__ = [
    # Config
    "DeftConfig",
    "ExperimentConfig",
    "LogLevel",
    "SweepGrid",
    "get_config",
    "set_config",
    # Core Models
    "AblationVariant",
    "DenoiseConfig",
    "Method",
    "ModelSpec",
    "Objective",
    "RankPolicy",
    "TrainConfig",
    "VectorMetadata",
    "DeftError",
    "DeftWarning",
    # Model
    "ParameterSet",
    "init_params",
    "predict",
    # Vectors
    "BinaryMask",
    "SparseVector",
    # Training
    "TrainingData",
    "full_finetune",
    "sparse_finetune",
    "sparse_train",
    # Method
    "SftResult",
    "ablation",
    "compute_delta",
    "deftx",
    "denoise_delta",
    "denoise_matrix",
    "global_topk_mask",
    "lt_sft",
    "select_rank",
    # Transfer
    "ComposedModel",
    "compose",
    "cross_lingual",
    "train_language_vector",
    "train_task_vector",
    "zero_shot_eval",
    # Analysis
    "jaccard",
    "mask_overlap",
    "overlap_matrix",
    "sparsity_report",
    # Runner
    "ExperimentRunner",
]
