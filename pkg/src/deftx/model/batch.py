"""
Model - Batches

Pre-tokenised integer batches fed to the encoder.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

IGNORE_INDEX = -100

# Reserved token ids; content tokens start at N_SPECIAL.
PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
N_SPECIAL = 3


@dataclass(frozen=True)
class Batch:
    """
    token_ids and attention_mask are (B, T); position 0 of every row is the
    classification token. mlm_labels is (B, T) with IGNORE_INDEX for
    unscored positions, class_labels is (B,).
    """
    token_ids: NDArray[np.int64]
    attention_mask: NDArray[np.float64]
    mlm_labels: Optional[NDArray[np.int64]] = None
    class_labels: Optional[NDArray[np.int64]] = None

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.token_ids.shape[1])

    def take(self, rows: Sequence[int]) -> "Batch":
        idx = np.asarray(rows, dtype=np.int64)
        return Batch(
            token_ids=self.token_ids[idx],
            attention_mask=self.attention_mask[idx],
            mlm_labels=None if self.mlm_labels is None else self.mlm_labels[idx],
            class_labels=None if self.class_labels is None else self.class_labels[idx],
        )
