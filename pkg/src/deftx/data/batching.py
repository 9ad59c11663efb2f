"""
Data - Batching

Example sets, MLM corruption and batch sampling for the training loops.
"""

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from ..core.models import Objective
from ..model.batch import CLS_ID, IGNORE_INDEX, MASK_ID, N_SPECIAL, PAD_ID, Batch


@dataclass(frozen=True)
class ExampleSet:
    """
    Padded sequences (N, T) with [CLS] at position 0, an attention mask and,
    for task data, one label per row.
    """
    token_ids: NDArray[np.int64]
    attention_mask: NDArray[np.float64]
    labels: Optional[NDArray[np.int64]] = None

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @classmethod
    def from_sentences(
        cls,
        sentences: Sequence[NDArray[np.int64]],
        max_seq_len: int,
        labels: Optional[Sequence[int]] = None,
    ) -> "ExampleSet":
        n = len(sentences)
        ids = np.full((n, max_seq_len), PAD_ID, dtype=np.int64)
        attn = np.zeros((n, max_seq_len))
        for i, sentence in enumerate(sentences):
            body = np.asarray(sentence, dtype=np.int64)[: max_seq_len - 1]
            ids[i, 0] = CLS_ID
            ids[i, 1 : 1 + body.size] = body
            attn[i, : 1 + body.size] = 1.0
        y = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(token_ids=ids, attention_mask=attn, labels=y)

    def subset(self, rows: Sequence[int]) -> "ExampleSet":
        idx = np.asarray(rows, dtype=np.int64)
        return ExampleSet(
            token_ids=self.token_ids[idx],
            attention_mask=self.attention_mask[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def split(self, holdout_fraction: float, rng: np.random.Generator) -> Tuple["ExampleSet", "ExampleSet"]:
        """Shuffled (train, held-out) split; the held-out part gets at least one row."""
        n = len(self)
        n_eval = min(max(1, int(round(holdout_fraction * n))), n - 1) if n > 1 else 0
        order = rng.permutation(n)
        return self.subset(np.sort(order[n_eval:])), self.subset(np.sort(order[:n_eval]))


def mlm_mask(
    token_ids: NDArray[np.int64],
    attention_mask: NDArray[np.float64],
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
    replace_probs: Tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Tuple[NDArray[np.int64], NDArray[np.int64]]:
    """
    Standard MLM corruption. Each real (non-pad, non-[CLS]) position is
    selected with probability mask_prob; selected positions become [MASK],
    a random content token or stay unchanged with replace_probs. Returns
    (corrupted ids, targets) with IGNORE_INDEX on unselected positions.
    """
    eligible = (attention_mask > 0) & (token_ids >= N_SPECIAL)
    draws = rng.random(token_ids.shape)
    selected = eligible & (draws < mask_prob)

    targets = np.where(selected, token_ids, IGNORE_INDEX).astype(np.int64)
    corrupted = token_ids.copy()
    choice = rng.random(token_ids.shape)
    to_mask = selected & (choice < replace_probs[0])
    to_random = selected & (choice >= replace_probs[0]) & (choice < replace_probs[0] + replace_probs[1])
    corrupted[to_mask] = MASK_ID
    random_tokens = rng.integers(N_SPECIAL, vocab_size, size=token_ids.shape)
    corrupted[to_random] = random_tokens[to_random]
    return corrupted, targets


def make_batch(
    examples: ExampleSet,
    rows: Sequence[int],
    objective: Objective,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
) -> Batch:
    sub = examples.subset(rows)
    if objective == Objective.CLASSIFY:
        return Batch(token_ids=sub.token_ids, attention_mask=sub.attention_mask, class_labels=sub.labels)

    corrupted, targets = mlm_mask(sub.token_ids, sub.attention_mask, rng, vocab_size, mask_prob)
    if mask_prob > 0 and not np.any(targets != IGNORE_INDEX):
        # Keep every training batch scoreable: force one eligible position.
        eligible = np.argwhere((sub.attention_mask > 0) & (sub.token_ids >= N_SPECIAL))
        if len(eligible):
            i, j = eligible[rng.integers(len(eligible))]
            targets[i, j] = sub.token_ids[i, j]
            corrupted[i, j] = MASK_ID
    return Batch(token_ids=corrupted, attention_mask=sub.attention_mask, mlm_labels=targets)


def iterate_train_batches(
    examples: ExampleSet,
    batch_size: int,
    objective: Objective,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
) -> Iterator[Batch]:
    """Endless epochs of shuffled batches, all randomness from `rng`."""
    n = len(examples)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield make_batch(examples, order[start : start + batch_size], objective, rng, vocab_size, mask_prob)


def eval_batches(
    examples: ExampleSet,
    batch_size: int,
    objective: Objective,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
) -> list[Batch]:
    """Fixed evaluation batches in row order (MLM corruption drawn once)."""
    return [
        make_batch(examples, np.arange(s, min(s + batch_size, len(examples))), objective, rng, vocab_size, mask_prob)
        for s in range(0, len(examples), batch_size)
    ]
