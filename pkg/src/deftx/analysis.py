"""
Analysis

Support overlap between sparse vectors, sparsity breakdowns and the
delimited result tables written by the CLI.

Overlap is directional: |support(a) & support(b)| / |support(a)|, because
language and task vectors are trained with different budgets. Jaccard is
reported next to it.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, Field

from .core.errors import IncompatibleError, UndefinedOverlapError, UsageError
from .model.params import layer_of
from .vectors import BinaryMask, SparseVector

logger = logging.getLogger(__name__)

Supported = Union[SparseVector, BinaryMask]

OVERLAP_DENOMINATOR = "|support(vector_a)|"

RESULT_COLUMNS = [
    "method",
    "rank_language",
    "rank_task",
    "k_language",
    "k_task",
    "epsilon",
    "seed",
    "source",
    "target",
    "metric",
    "score",
]


def _mask_of(x: Supported) -> BinaryMask:
    return x.support() if isinstance(x, SparseVector) else x


def _intersection(a: BinaryMask, b: BinaryMask) -> int:
    if dict(a.shapes) != dict(b.shapes):
        raise IncompatibleError("overlap needs supports over the same parameter layout")
    return int(
        sum(np.intersect1d(idx, b.support(name), assume_unique=True).size for name, idx in a.nonempty())
    )


def mask_overlap(a: Supported, b: Supported) -> float:
    ma, mb = _mask_of(a), _mask_of(b)
    if ma.k == 0:
        raise UndefinedOverlapError("overlap against an empty support")
    return _intersection(ma, mb) / ma.k


def jaccard(a: Supported, b: Supported) -> float:
    ma, mb = _mask_of(a), _mask_of(b)
    shared = _intersection(ma, mb)
    union = ma.k + mb.k - shared
    if union == 0:
        raise UndefinedOverlapError("jaccard of two empty supports")
    return shared / union


def overlap_matrix(vectors: Sequence[Supported], measure: str = "directional") -> NDArray[np.float64]:
    """Entry (i, j) is overlap(v_i, v_j); the diagonal is 1."""
    if len(vectors) < 2:
        raise UsageError("overlap_matrix needs at least two vectors")
    fn = {"directional": mask_overlap, "jaccard": jaccard}[measure]
    masks = [_mask_of(v) for v in vectors]
    n = len(masks)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = fn(masks[i], masks[j])
    return out


def overlap_frame(vectors: Sequence[Supported], labels: Sequence[str]) -> pd.DataFrame:
    """Long format: one row per ordered pair (vector_a, vector_b)."""
    if len(labels) != len(vectors):
        raise UsageError("one label per vector is required")
    directional = overlap_matrix(vectors, "directional")
    jac = overlap_matrix(vectors, "jaccard")
    rows = [
        {"vector_a": labels[i], "vector_b": labels[j], "overlap": directional[i, j], "jaccard": jac[i, j]}
        for i in range(len(labels))
        for j in range(len(labels))
    ]
    return pd.DataFrame(rows, columns=["vector_a", "vector_b", "overlap", "jaccard"])


def group_overlap_frame(
    groups: Mapping[str, Sequence[Supported]],
    references: Mapping[str, Sequence[Supported]],
    labels: Sequence[str],
) -> pd.DataFrame:
    """
    Per-method, per-label overlap of group vectors (e.g. language vectors)
    with the matching reference vectors (e.g. task vectors).
    """
    rows = []
    for method, vectors in groups.items():
        for label, vector, ref in zip(labels, vectors, references[method]):
            rows.append({
                "method": method,
                "label": label,
                "overlap": mask_overlap(vector, ref),
                "jaccard": jaccard(vector, ref),
            })
    return pd.DataFrame(rows, columns=["method", "label", "overlap", "jaccard"])


# --- SPARSITY ---

class TensorStats(BaseModel):
    count: int
    size: int
    mean_abs: float = 0.0
    max_abs: float = 0.0


class SparsityReport(BaseModel):
    """Where a vector's support lives"""
    label: str = ""
    k: int
    per_tensor: Dict[str, TensorStats] = Field(default_factory=dict)
    per_layer: Dict[str, int] = Field(default_factory=dict)
    per_class: Dict[str, int] = Field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"tensor": name, **stats.model_dump()} for name, stats in self.per_tensor.items()],
            columns=["tensor", "count", "size", "mean_abs", "max_abs"],
        )


def sparsity_report(phi: SparseVector) -> SparsityReport:
    per_tensor: Dict[str, TensorStats] = {}
    per_layer: Dict[str, int] = {}
    per_class: Dict[str, int] = {}
    for name, shape in phi.shapes.items():
        values = phi.values.get(name, np.zeros(0))
        count = int(values.size)
        per_tensor[name] = TensorStats(
            count=count,
            size=int(np.prod(shape, dtype=np.int64)),
            mean_abs=float(np.abs(values).mean()) if count else 0.0,
            max_abs=float(np.abs(values).max()) if count else 0.0,
        )
        layer = layer_of(name)
        per_layer[layer] = per_layer.get(layer, 0) + count
        cls = phi.classes[name].value
        per_class[cls] = per_class.get(cls, 0) + count
    return SparsityReport(label=phi.metadata.label, k=phi.k, per_tensor=per_tensor, per_layer=per_layer, per_class=per_class)


# --- TABLES ---

def write_table(frame: pd.DataFrame, path: Union[str, Path], header: Iterable[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        frame.to_csv(fh, index=False)
    return path


def write_overlap_tables(
    vectors: Sequence[Supported], labels: Sequence[str], out_dir: Union[str, Path]
) -> Dict[str, Path]:
    """Wide matrix (directional) and long-format tables, each with the denominator in its header."""
    out_dir = Path(out_dir)
    header = [f"overlap denominator: {OVERLAP_DENOMINATOR}", "jaccard: |a & b| / |a | b|"]
    wide = pd.DataFrame(overlap_matrix(vectors), index=list(labels), columns=list(labels))
    wide.index.name = "vector_a"
    wide_path = write_table(wide.reset_index(), out_dir / "overlap_matrix.csv", header)
    long_path = write_table(overlap_frame(vectors, labels), out_dir / "overlap_long.csv", header)
    logger.info("overlap tables written to %s", out_dir)
    return {"matrix": wide_path, "long": long_path}


def results_frame(rows: Iterable[Mapping[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise UsageError(f"result rows lack columns {missing}")
    return frame[RESULT_COLUMNS]


def write_results_table(rows: Iterable[Mapping[str, Any]], path: Union[str, Path], header: Iterable[str] = ()) -> Path:
    return write_table(results_frame(rows), path, header)


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def score_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean score per (method, ranks, budget, epsilon), averaged over seeds and targets."""
    keys: List[str] = ["method", "rank_language", "rank_task", "k_language", "k_task", "epsilon"]
    return frame.groupby(keys, as_index=False)["score"].mean()
