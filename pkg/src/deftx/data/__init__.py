"""
Data Module

Synthetic multilingual corpora, classification tasks and batching.
"""

from .batching import ExampleSet, mlm_mask, make_batch, iterate_train_batches, eval_batches
from .synth import (
    DEFAULT_EPSILONS,
    LanguageSpec,
    TaskSpec,
    Corpus,
    LabeledDataset,
    gen_corpus,
    gen_task_data,
)

__all__ = [
    "ExampleSet",
    "mlm_mask",
    "make_batch",
    "iterate_train_batches",
    "eval_batches",
    "DEFAULT_EPSILONS",
    "LanguageSpec",
    "TaskSpec",
    "Corpus",
    "LabeledDataset",
    "gen_corpus",
    "gen_task_data",
]
