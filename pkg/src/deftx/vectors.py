"""
Vectors

Binary masks and sparse fine-tuned vectors (SFTs) over a ParameterSet
layout. Both store, per tensor, a sorted array of flat indices.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Optional, Set, Tuple

import numpy as np
from numpy.typing import NDArray

from .core.errors import FormatError, IncompatibleError
from .core.models import TensorClass, VectorMetadata
from .core.provenance import digest_arrays
from .model.params import DeltaSet, ParameterSet

IndexArray = NDArray[np.int64]
Shape = Tuple[int, ...]

_EMPTY = np.empty(0, dtype=np.int64)


def _size(shape: Shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def _check_indices(name: str, idx: IndexArray, shape: Shape) -> None:
    if idx.size == 0:
        return
    if np.any(np.diff(idx) <= 0):
        raise FormatError(f"indices of tensor {name!r} are not strictly increasing")
    if idx[0] < 0 or idx[-1] >= _size(shape):
        raise FormatError(f"indices of tensor {name!r} fall outside shape {shape}")


@dataclass(frozen=True)
class BinaryMask:
    """Per-tensor sorted flat-index sets selecting trainable coordinates"""
    shapes: Dict[str, Shape]
    indices: Dict[str, IndexArray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, idx in self.indices.items():
            if name not in self.shapes:
                raise IncompatibleError(f"mask names unknown tensor {name!r}")
            _check_indices(name, idx, self.shapes[name])

    @classmethod
    def empty(cls, template: ParameterSet) -> "BinaryMask":
        return cls(shapes=template.shapes)

    @classmethod
    def full(cls, template: ParameterSet, names: Optional[Iterable[str]] = None) -> "BinaryMask":
        chosen = template.names() if names is None else list(names)
        return cls(
            shapes=template.shapes,
            indices={n: np.arange(template[n].size, dtype=np.int64) for n in chosen},
        )

    @property
    def k(self) -> int:
        return int(sum(idx.size for idx in self.indices.values()))

    def support(self, name: str) -> IndexArray:
        return self.indices.get(name, _EMPTY)

    def nonempty(self) -> Iterator[Tuple[str, IndexArray]]:
        for name in self.shapes:
            idx = self.indices.get(name)
            if idx is not None and idx.size:
                yield name, idx

    def coordinates(self) -> Set[Tuple[str, int]]:
        return {(name, int(i)) for name, idx in self.nonempty() for i in idx}

    def dense(self, name: str) -> NDArray[np.bool_]:
        flat = np.zeros(_size(self.shapes[name]), dtype=bool)
        flat[self.support(name)] = True
        return flat.reshape(self.shapes[name])

    def issubset(self, other: "BinaryMask") -> bool:
        return all(np.isin(idx, other.support(name)).all() for name, idx in self.nonempty())

    def check_compatible(self, params: ParameterSet) -> None:
        if list(self.shapes) != params.names() or any(
            tuple(self.shapes[n]) != params[n].shape for n in self.shapes
        ):
            raise IncompatibleError("mask layout does not match the parameter set")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shapes == other.shapes and all(
            np.array_equal(self.support(n), other.support(n)) for n in self.shapes
        )


@dataclass
class SparseVector:
    """
    A sparse fine-tuned vector: per-tensor sorted (flat index, value) pairs.
    The layout (names, shapes, classes) of the originating ParameterSet is
    kept so the vector can be densified or composed on its own.
    """
    shapes: Dict[str, Shape]
    classes: Dict[str, TensorClass]
    indices: Dict[str, IndexArray]
    values: Dict[str, NDArray[np.float64]]
    metadata: VectorMetadata

    def __post_init__(self) -> None:
        for name in self.indices:
            if name not in self.shapes:
                raise IncompatibleError(f"vector names unknown tensor {name!r}")
            idx, val = self.indices[name], self.values[name]
            if idx.shape != val.shape:
                raise FormatError(f"tensor {name!r} has {idx.size} indices but {val.size} values")
            _check_indices(name, idx, self.shapes[name])
            if not np.all(np.isfinite(val)):
                raise FormatError(f"tensor {name!r} holds non-finite values")

    # --- CONSTRUCTION ---

    @classmethod
    def from_dense(cls, delta: DeltaSet, mask: BinaryMask, metadata: VectorMetadata) -> "SparseVector":
        """Values of `delta` on the support of `mask` (explicit zeros kept)."""
        mask.check_compatible(delta)
        indices: Dict[str, IndexArray] = {}
        values: Dict[str, NDArray[np.float64]] = {}
        for name, idx in mask.nonempty():
            indices[name] = idx.copy()
            values[name] = delta[name].reshape(-1)[idx].copy()
        metadata = metadata.model_copy(update={"k": mask.k})
        return cls(shapes=delta.shapes, classes=delta.classes, indices=indices, values=values, metadata=metadata)

    @classmethod
    def from_difference(
        cls, updated: ParameterSet, base: ParameterSet, mask: BinaryMask, metadata: VectorMetadata
    ) -> "SparseVector":
        updated.check_compatible(base)
        mask.check_compatible(base)
        indices: Dict[str, IndexArray] = {}
        values: Dict[str, NDArray[np.float64]] = {}
        for name, idx in mask.nonempty():
            indices[name] = idx.copy()
            values[name] = updated[name].reshape(-1)[idx] - base[name].reshape(-1)[idx]
        metadata = metadata.model_copy(update={"k": mask.k})
        return cls(shapes=base.shapes, classes=base.classes, indices=indices, values=values, metadata=metadata)

    # --- VIEWS ---

    @property
    def k(self) -> int:
        return int(sum(idx.size for idx in self.indices.values()))

    def support(self) -> BinaryMask:
        return BinaryMask(shapes=dict(self.shapes), indices={n: i.copy() for n, i in self.indices.items()})

    def nonempty(self) -> Iterator[Tuple[str, IndexArray, NDArray[np.float64]]]:
        for name in self.shapes:
            idx = self.indices.get(name)
            if idx is not None and idx.size:
                yield name, idx, self.values[name]

    def check_compatible(self, params: ParameterSet) -> None:
        if list(self.shapes) != params.names() or any(
            tuple(self.shapes[n]) != params[n].shape for n in self.shapes
        ):
            raise IncompatibleError(f"vector {self.metadata.label!r} does not match the parameter layout")

    def densify(self, template: Optional[ParameterSet] = None) -> DeltaSet:
        tensors = {}
        for name, shape in self.shapes.items():
            flat = np.zeros(_size(shape))
            if name in self.indices:
                flat[self.indices[name]] = self.values[name]
            tensors[name] = flat.reshape(shape)
        return ParameterSet(tensors, self.classes, template.spec if template is not None else None)

    def digest(self) -> str:
        def items():
            for name, idx, val in self.nonempty():
                yield f"{name}:idx", idx
                yield f"{name}:val", val
        return digest_arrays(items())

    def __repr__(self) -> str:
        return f"SparseVector({self.metadata.kind.value}:{self.metadata.label}, k={self.k})"
