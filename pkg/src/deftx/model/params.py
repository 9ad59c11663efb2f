"""
Model - Parameter sets

Named, ordered tensor collections (a model's weights) with class tags, and
the deterministic initialiser for the toy encoder.
"""

from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..core.errors import IncompatibleError
from ..core.models import ModelSpec, TensorClass
from ..core.provenance import digest_arrays
from ..numerics import Tensor

HEAD_PREFIX = "cls."


class ParameterSet:
    """
    Ordered map from canonical tensor name to a float64 tensor, plus a class
    tag per tensor. Two sets built from the same ModelSpec are
    index-compatible: same names, shapes and order.
    """

    def __init__(
        self,
        tensors: Mapping[str, Tensor],
        classes: Mapping[str, TensorClass],
        spec: Optional[ModelSpec] = None,
    ):
        if list(tensors) != list(classes):
            raise IncompatibleError("tensor names and class tags disagree")
        self._tensors: Dict[str, Tensor] = {
            name: np.ascontiguousarray(value, dtype=np.float64) for name, value in tensors.items()
        }
        self._classes: Dict[str, TensorClass] = dict(classes)
        self.spec = spec

    # --- MAPPING INTERFACE ---

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name not in self._tensors:
            raise IncompatibleError(f"unknown tensor {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if value.shape != self._tensors[name].shape:
            raise IncompatibleError(
                f"shape mismatch for {name!r}: {value.shape} vs {self._tensors[name].shape}"
            )
        self._tensors[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._tensors.items()

    @property
    def classes(self) -> Dict[str, TensorClass]:
        return dict(self._classes)

    def class_of(self, name: str) -> TensorClass:
        return self._classes[name]

    def names_of(self, *classes: TensorClass) -> List[str]:
        wanted = set(classes)
        return [n for n, c in self._classes.items() if c in wanted]

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def num_scalars(self, names: Optional[Iterable[str]] = None) -> int:
        selected = self._tensors if names is None else {n: self._tensors[n] for n in names}
        return int(sum(t.size for t in selected.values()))

    # --- COMPATIBILITY ---

    def is_compatible(self, other: "ParameterSet") -> bool:
        return self.names() == other.names() and all(
            self._tensors[n].shape == other[n].shape for n in self._tensors
        )

    def check_compatible(self, other: "ParameterSet") -> None:
        if self.names() != other.names():
            missing = set(self.names()) ^ set(other.names())
            raise IncompatibleError(f"parameter sets differ in tensors: {sorted(missing)[:5]}")
        for name, tensor in self._tensors.items():
            if tensor.shape != other[name].shape:
                raise IncompatibleError(f"shape mismatch for {name!r}: {tensor.shape} vs {other[name].shape}")

    # --- CONSTRUCTION ---

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: t.copy() for n, t in self._tensors.items()}, self._classes, self.spec)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({n: np.zeros_like(t) for n, t in self._tensors.items()}, self._classes, self.spec)

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParameterSet":
        return ParameterSet({n: fn(n, t) for n, t in self._tensors.items()}, self._classes, self.spec)

    def fragment(self, names: Iterable[str]) -> "ParameterSet":
        """Sub-set with the given tensors, in this set's order."""
        wanted = set(names)
        order = [n for n in self._tensors if n in wanted]
        return ParameterSet(
            {n: self._tensors[n].copy() for n in order},
            {n: self._classes[n] for n in order},
            self.spec,
        )

    def with_fragment(self, fragment: "ParameterSet") -> "ParameterSet":
        """Copy with the tensors of `fragment` swapped in."""
        result = self.copy()
        for name, tensor in fragment.items():
            result[name] = tensor.copy()
        return result

    def __sub__(self, other: "ParameterSet") -> "ParameterSet":
        self.check_compatible(other)
        return self.map(lambda n, t: t - other[n])

    def __add__(self, other: "ParameterSet") -> "ParameterSet":
        self.check_compatible(other)
        return self.map(lambda n, t: t + other[n])

    # --- IDENTITY ---

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        if not self.is_compatible(other):
            return False
        return all(
            np.array_equal(t.view(np.uint64), other[n].view(np.uint64)) for n, t in self._tensors.items()
        )

    def digest(self) -> str:
        return digest_arrays(self._tensors.items())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.num_scalars()} scalars)"


GradientSet = ParameterSet
DeltaSet = ParameterSet


def parameter_layout(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...], TensorClass]]:
    """Canonical (name, shape, class) enumeration for a pre-LN encoder"""
    d, ff, V = spec.d_model, spec.d_ff, spec.vocab_size
    layout: List[Tuple[str, Tuple[int, ...], TensorClass]] = [
        ("embed.token", (V, d), TensorClass.EMBEDDING),
        ("embed.position", (spec.max_seq_len, d), TensorClass.EMBEDDING),
    ]
    for l in range(spec.n_layers):
        p = f"layers.{l}"
        layout += [
            (f"{p}.ln1.gain", (d,), TensorClass.LAYER_NORM),
            (f"{p}.ln1.bias", (d,), TensorClass.LAYER_NORM),
        ]
        for proj in ("query", "key", "value", "output"):
            layout += [
                (f"{p}.attn.{proj}.weight", (d, d), TensorClass.WEIGHT),
                (f"{p}.attn.{proj}.bias", (d,), TensorClass.BIAS),
            ]
        layout += [
            (f"{p}.ln2.gain", (d,), TensorClass.LAYER_NORM),
            (f"{p}.ln2.bias", (d,), TensorClass.LAYER_NORM),
            (f"{p}.ffn.in.weight", (d, ff), TensorClass.WEIGHT),
            (f"{p}.ffn.in.bias", (ff,), TensorClass.BIAS),
            (f"{p}.ffn.out.weight", (ff, d), TensorClass.WEIGHT),
            (f"{p}.ffn.out.bias", (d,), TensorClass.BIAS),
        ]
    layout += [
        ("final_ln.gain", (d,), TensorClass.LAYER_NORM),
        ("final_ln.bias", (d,), TensorClass.LAYER_NORM),
        ("mlm.decoder.weight", (d, V), TensorClass.WEIGHT),
        ("mlm.decoder.bias", (V,), TensorClass.BIAS),
    ]
    layout += head_layout(spec)
    return layout


def head_layout(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...], TensorClass]]:
    """Two-layer classification head on the [CLS] position"""
    d = spec.d_model
    return [
        (f"{HEAD_PREFIX}dense.weight", (d, d), TensorClass.HEAD),
        (f"{HEAD_PREFIX}dense.bias", (d,), TensorClass.HEAD),
        (f"{HEAD_PREFIX}out.weight", (d, spec.n_classes), TensorClass.HEAD),
        (f"{HEAD_PREFIX}out.bias", (spec.n_classes,), TensorClass.HEAD),
    ]


def _init_tensor(name: str, shape: Tuple[int, ...], cls: TensorClass, rng: np.random.Generator) -> Tensor:
    if len(shape) == 1:
        # Layer-norm gains start at one; every other vector is zero.
        return np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
    fan_in = shape[1] if cls == TensorClass.EMBEDDING else shape[0]
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """
    Deterministic initialisation: matrices ~ N(0, 1/fan_in), biases zero,
    layer-norm gains one. Embedding rows use the model width as fan-in.
    """
    tensors: Dict[str, Tensor] = {}
    classes: Dict[str, TensorClass] = {}
    for name, shape, cls in parameter_layout(spec):
        tensors[name] = _init_tensor(name, shape, cls, rng)
        classes[name] = cls
    return ParameterSet(tensors, classes, spec)


def init_head(spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """Fresh classification head, used at the start of every task phase"""
    tensors = {name: _init_tensor(name, shape, cls, rng) for name, shape, cls in head_layout(spec)}
    return ParameterSet(tensors, {name: cls for name, _, cls in head_layout(spec)}, spec)


def head_names(params: ParameterSet) -> List[str]:
    return params.names_of(TensorClass.HEAD)


def layer_of(name: str) -> str:
    """Grouping key for per-layer reports: `layers.3`, `embed`, `final_ln`, `mlm` or `cls`"""
    parts = name.split(".")
    if parts[0] == "layers":
        return ".".join(parts[:2])
    return parts[0]
