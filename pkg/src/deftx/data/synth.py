"""
Data - Synthetic languages and tasks

Every language is a first-order Markov chain over a shared vocabulary,
interpolated between a chain shared by all languages and one unique to the
language. Task sentences plant class marker tokens into the chain so the
labelling rule is the same everywhere while surface statistics differ.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Sequence

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..model.batch import N_SPECIAL
from ..numerics import make_rng
from .batching import ExampleSet

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.2, 0.5, 0.8)


class LanguageSpec(BaseModel):
    """A synthetic language: chain divergence epsilon and sentence lengths"""
    model_config = ConfigDict(frozen=True)

    language_id: str
    vocab_size: int = Field(default=64, gt=N_SPECIAL + 1)
    epsilon: float = Field(default=0.5, ge=0.0, le=1.0)
    base_seed: int = 0
    min_len: int = Field(default=8, ge=2)
    max_len: int = Field(default=20, ge=2)
    concentration: float = Field(default=0.3, gt=0.0)

    @model_validator(mode="after")
    def _length_range(self) -> "LanguageSpec":
        if self.min_len > self.max_len:
            raise ValueError(f"min_len={self.min_len} exceeds max_len={self.max_len}")
        return self

    @property
    def n_content(self) -> int:
        return self.vocab_size - N_SPECIAL

    def transition_table(self) -> NDArray[np.float64]:
        """(V, V) row-stochastic table; only content tokens receive mass."""
        return _transition_table(self.vocab_size, self.base_seed, self.language_id, self.epsilon, self.concentration)


@lru_cache(maxsize=32)
def _chain(vocab_size: int, concentration: float, seed: int, *keys: str) -> NDArray[np.float64]:
    rng = make_rng(seed, *keys)
    c = vocab_size - N_SPECIAL
    table = np.zeros((vocab_size, vocab_size))
    table[:, N_SPECIAL:] = rng.dirichlet(np.full(c, concentration), size=vocab_size)
    return table


@lru_cache(maxsize=32)
def _transition_table(
    vocab_size: int, base_seed: int, language_id: str, epsilon: float, concentration: float
) -> NDArray[np.float64]:
    base = _chain(vocab_size, concentration, base_seed, "base-chain")
    unique = _chain(vocab_size, concentration, base_seed, "language-chain", language_id)
    table = (1.0 - epsilon) * base + epsilon * unique
    table /= table.sum(axis=1, keepdims=True)
    table.flags.writeable = False
    return table


class TaskSpec(BaseModel):
    """Classification by dominant marker-token set"""
    model_config = ConfigDict(frozen=True)

    n_classes: int = Field(default=3, ge=2)
    markers_per_class: int = Field(default=3, ge=1)
    marker_seed: int = 0
    min_dominant: int = Field(default=2, ge=1)
    max_dominant: int = Field(default=3, ge=1)

    def marker_sets(self, vocab_size: int) -> List[NDArray[np.int64]]:
        needed = self.n_classes * self.markers_per_class
        content = vocab_size - N_SPECIAL
        if needed >= content:
            raise ValueError(f"{needed} marker tokens do not fit into {content} content tokens")
        picks = make_rng(self.marker_seed, "markers").permutation(content)[:needed] + N_SPECIAL
        return [np.sort(picks[c * self.markers_per_class : (c + 1) * self.markers_per_class]) for c in range(self.n_classes)]

    def label_of(self, tokens: Sequence[int], vocab_size: int) -> int:
        """Class whose marker set occurs most often (first class on ties)."""
        tokens = np.asarray(tokens)
        counts = [int(np.isin(tokens, markers).sum()) for markers in self.marker_sets(vocab_size)]
        return int(np.argmax(counts))


@dataclass
class Corpus:
    """Unlabelled sentences of one language as one flat token array plus offsets"""
    language_id: str
    vocab_size: int
    seed: int
    tokens: NDArray[np.int64]
    offsets: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def sentences(self) -> List[NDArray[np.int64]]:
        return [self.tokens[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def to_examples(self, max_seq_len: int) -> ExampleSet:
        """Sentences longer than max_seq_len - 1 are cut to fit after [CLS]."""
        lengths = np.diff(self.offsets)
        too_long = int((lengths > max_seq_len - 1).sum())
        if too_long:
            logger.warning(
                "%s: truncating %d of %d sentences to %d tokens (longest %d)",
                self.language_id, too_long, len(self), max_seq_len - 1, int(lengths.max()),
            )
        return ExampleSet.from_sentences(self.sentences(), max_seq_len)


@dataclass
class LabeledDataset:
    language_id: str
    vocab_size: int
    sentences: List[NDArray[np.int64]]
    labels: NDArray[np.int64]
    task: TaskSpec = field(default_factory=TaskSpec)

    def __len__(self) -> int:
        return len(self.sentences)

    def to_examples(self, max_seq_len: int) -> ExampleSet:
        longest = max((len(s) for s in self.sentences), default=0)
        if longest > max_seq_len - 1:
            raise ValueError(f"sentence of length {longest} does not fit max_seq_len={max_seq_len}")
        return ExampleSet.from_sentences(self.sentences, max_seq_len, self.labels)


def _sample(cdf: NDArray[np.float64], u: float) -> int:
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))


def gen_corpus(lang: LanguageSpec, n_sentences: int, seed: int) -> Corpus:
    """
    Deterministic corpus of n_sentences chain samples. The random stream
    depends on `seed` only, so languages with identical chains produce
    identical corpora.
    """
    rng = make_rng(seed, "corpus")
    cdf = np.cumsum(lang.transition_table()[:, N_SPECIAL:], axis=1)
    lengths = rng.integers(lang.min_len, lang.max_len + 1, size=n_sentences)
    tokens = np.empty(int(lengths.sum()), dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)

    for s in range(n_sentences):
        start = offsets[s]
        prev = N_SPECIAL + int(rng.integers(lang.n_content))
        tokens[start] = prev
        draws = rng.random(lengths[s] - 1)
        for i, u in enumerate(draws, start=1):
            prev = N_SPECIAL + _sample(cdf[prev], u)
            tokens[start + i] = prev
    logger.debug("generated %d sentences (%d tokens) for %s", n_sentences, tokens.size, lang.language_id)
    return Corpus(language_id=lang.language_id, vocab_size=lang.vocab_size, seed=seed, tokens=tokens, offsets=offsets)


def gen_task_data(lang: LanguageSpec, task: TaskSpec, n_examples: int, seed: int) -> LabeledDataset:
    """
    Labelled sentences whose label is the class with the most marker tokens.
    Markers and the filler around them are drawn through the language chain.
    """
    rng = make_rng(seed, "task", task.marker_seed)
    table = lang.transition_table()
    markers = task.marker_sets(lang.vocab_size)
    all_markers = np.concatenate(markers)
    filler = np.setdiff1d(np.arange(N_SPECIAL, lang.vocab_size), all_markers)
    min_len = max(lang.min_len, task.max_dominant + (task.n_classes - 1) * (task.max_dominant - 1) + 1)

    labels = rng.permutation(np.arange(n_examples) % task.n_classes).astype(np.int64)
    sentences: List[NDArray[np.int64]] = []
    for y in labels:
        length = int(rng.integers(min_len, max(min_len, lang.max_len) + 1))
        plan = np.full(length, -1, dtype=np.int64)
        dominant = int(rng.integers(task.min_dominant, task.max_dominant + 1))
        counts = {int(y): dominant}
        for c in range(task.n_classes):
            if c != y:
                counts[c] = int(rng.integers(0, dominant))
        slots = rng.permutation(length)
        cursor = 0
        for c, count in counts.items():
            plan[slots[cursor : cursor + count]] = c
            cursor += count

        sentence = np.empty(length, dtype=np.int64)
        prev = -1
        for pos in range(length):
            candidates = filler if plan[pos] < 0 else markers[plan[pos]]
            weights = np.ones(len(candidates)) if prev < 0 else table[prev, candidates]
            total = weights.sum()
            probs = weights / total if total > 0 else np.full(len(candidates), 1.0 / len(candidates))
            prev = int(candidates[_sample(np.cumsum(probs), rng.random())])
            sentence[pos] = prev
        sentences.append(sentence)

    return LabeledDataset(
        language_id=lang.language_id,
        vocab_size=lang.vocab_size,
        sentences=sentences,
        labels=labels,
        task=task,
    )
