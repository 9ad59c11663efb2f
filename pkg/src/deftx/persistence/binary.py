"""
Persistence - Binary containers

Little-endian files for checkpoints (DFTX), sparse vectors (DFTS), masks
(DFTM) and synthetic corpora (DFTC). Every file starts with a 4-byte magic
and a u32 format version. Loads validate everything before building an
object and raise FormatError with the byte offset of the first problem.
Saves write a temp file next to the target and rename it into place.
"""

import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from ..core.errors import FormatError, MissingInputError
from ..core.models import ModelSpec, TensorClass, VectorMetadata
from ..core.provenance import digest_model
from ..data.synth import Corpus
from ..model.params import ParameterSet
from ..vectors import BinaryMask, SparseVector

PathLike = Union[str, Path]

FORMAT_VERSION = 1

CHECKPOINT_MAGIC = b"DFTX"
VECTOR_MAGIC = b"DFTS"
MASK_MAGIC = b"DFTM"
CORPUS_MAGIC = b"DFTC"

_CLASS_CODES: List[TensorClass] = list(TensorClass)

# no real tensor holds more float64 scalars than int64 byte offsets can address
_MAX_SCALARS = np.iinfo(np.int64).max // 8


class _Writer:
    header: ClassVar[struct.Struct] = struct.Struct("<4sI")
    u8: ClassVar[struct.Struct] = struct.Struct("<B")
    u32: ClassVar[struct.Struct] = struct.Struct("<I")
    u64: ClassVar[struct.Struct] = struct.Struct("<Q")
    i64: ClassVar[struct.Struct] = struct.Struct("<q")

    def __init__(self, magic: bytes):
        self.chunks: List[bytes] = [self.header.pack(magic, FORMAT_VERSION)]

    def uint(self, fmt: struct.Struct, value: int) -> None:
        self.chunks.append(fmt.pack(value))

    def text(self, value: str) -> None:
        raw = value.encode("utf-8")
        self.uint(self.u32, len(raw))
        self.chunks.append(raw)

    def shape(self, shape: Tuple[int, ...]) -> None:
        self.uint(self.u8, len(shape))
        for extent in shape:
            self.uint(self.u64, extent)

    def array(self, values: np.ndarray, dtype: str) -> None:
        self.chunks.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


class _Reader:
    def __init__(self, data: bytes, path: Optional[str] = None):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: Optional[int] = None) -> FormatError:
        return FormatError(message, offset=self.pos if offset is None else offset, path=self.path)

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.fail(f"truncated file: needed {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def uint(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]

    def header(self, magic: bytes) -> None:
        found, version = _Writer.header.unpack(self.take(_Writer.header.size))
        if found != magic:
            raise self.fail(f"bad magic {found!r}, expected {magic!r}", offset=0)
        if version != FORMAT_VERSION:
            raise self.fail(f"unsupported format version {version}", offset=4)

    def text(self) -> str:
        raw = self.take(self.uint(_Writer.u32))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.fail("invalid utf-8 string", offset=self.pos - len(raw)) from exc

    def shape(self) -> Tuple[int, ...]:
        at = self.pos
        rank = self.uint(_Writer.u8)
        shape = tuple(self.uint(_Writer.u64) for _ in range(rank))
        if any(extent > _MAX_SCALARS for extent in shape) or math.prod(shape) > _MAX_SCALARS:
            raise self.fail(f"shape {shape} is too large", offset=at)
        return shape

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        if count > (len(self.data) - self.pos) // size:
            raise self.fail(f"truncated array of {count} items")
        return np.frombuffer(self.take(count * size), dtype=dtype).copy()

    def tensor_class(self) -> TensorClass:
        code = self.uint(_Writer.u8)
        if code >= len(_CLASS_CODES):
            raise self.fail(f"unknown tensor class code {code}", offset=self.pos - 1)
        return _CLASS_CODES[code]

    def json(self) -> Any:
        start = self.pos
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as exc:
            raise self.fail("invalid JSON block", offset=start) from exc

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise self.fail(f"{len(self.data) - self.pos} trailing bytes")


def atomic_write(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read(path: PathLike) -> _Reader:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"no such file: {path}")
    return _Reader(path.read_bytes(), str(path))


def _size(shape: Tuple[int, ...]) -> int:
    return math.prod(shape)


# --- CHECKPOINT ---

def checkpoint_bytes(params: ParameterSet) -> bytes:
    w = _Writer(CHECKPOINT_MAGIC)
    spec_json = params.spec.model_dump_json() if params.spec is not None else ""
    w.text(digest_model(params.spec) if params.spec is not None else "")
    w.text(spec_json)
    w.uint(w.u32, len(params))
    for name, tensor in params.items():
        w.text(name)
        w.uint(w.u8, _CLASS_CODES.index(params.class_of(name)))
        w.shape(tensor.shape)
        w.array(tensor, "<f8")
    return w.getvalue()


def save_checkpoint(params: ParameterSet, path: PathLike) -> Path:
    return atomic_write(path, checkpoint_bytes(params))


def parse_checkpoint(r: _Reader) -> ParameterSet:
    r.header(CHECKPOINT_MAGIC)
    digest_at = r.pos
    digest = r.text()
    spec_json = r.text()
    spec = None
    if spec_json:
        try:
            spec = ModelSpec.model_validate_json(spec_json)
        except ValidationError as exc:
            raise r.fail("invalid model spec block", offset=digest_at) from exc
        if digest_model(spec) != digest:
            raise r.fail("model spec digest mismatch", offset=digest_at)

    tensors: Dict[str, np.ndarray] = {}
    classes: Dict[str, TensorClass] = {}
    for _ in range(r.uint(_Writer.u32)):
        at = r.pos
        name = r.text()
        if name in tensors:
            raise r.fail(f"duplicate tensor {name!r}", offset=at)
        classes[name] = r.tensor_class()
        shape = r.shape()
        values = r.array("<f8", _size(shape))
        tensors[name] = values.astype(np.float64).reshape(shape)
    r.finish()
    return ParameterSet(tensors, classes, spec)


def load_checkpoint(path: PathLike) -> ParameterSet:
    return parse_checkpoint(_read(path))


# --- SPARSE VECTOR ---

def vector_bytes(phi: SparseVector) -> bytes:
    w = _Writer(VECTOR_MAGIC)
    w.text(phi.metadata.model_dump_json())
    w.uint(w.u32, len(phi.shapes))
    for name, shape in phi.shapes.items():
        idx = phi.indices.get(name, np.empty(0, dtype=np.int64))
        w.text(name)
        w.uint(w.u8, _CLASS_CODES.index(phi.classes[name]))
        w.shape(shape)
        w.uint(w.u64, idx.size)
        w.array(idx, "<u8")
        w.array(phi.values.get(name, np.empty(0)), "<f8")
    return w.getvalue()


def save_vector(phi: SparseVector, path: PathLike) -> Path:
    return atomic_write(path, vector_bytes(phi))


def parse_vector(r: _Reader) -> SparseVector:
    r.header(VECTOR_MAGIC)
    meta_at = r.pos
    try:
        metadata = VectorMetadata.model_validate(r.json())
    except ValidationError as exc:
        raise r.fail("invalid vector metadata", offset=meta_at) from exc

    shapes: Dict[str, Tuple[int, ...]] = {}
    classes: Dict[str, TensorClass] = {}
    indices: Dict[str, NDArray[np.int64]] = {}
    values: Dict[str, NDArray[np.float64]] = {}
    for _ in range(r.uint(_Writer.u32)):
        at = r.pos
        name = r.text()
        if name in shapes:
            raise r.fail(f"duplicate tensor {name!r}", offset=at)
        classes[name] = r.tensor_class()
        shapes[name] = r.shape()
        nnz = r.uint(_Writer.u64)
        idx_at = r.pos
        idx = r.array("<u8", nnz)
        val = r.array("<f8", nnz)
        if nnz:
            if np.any(np.diff(idx.astype(np.int64)) <= 0) or idx[-1] >= _size(shapes[name]):
                raise r.fail(f"indices of tensor {name!r} are unsorted or out of range", offset=idx_at)
            if not np.all(np.isfinite(val)):
                raise r.fail(f"tensor {name!r} holds non-finite values", offset=idx_at + 8 * nnz)
            indices[name] = idx.astype(np.int64)
            values[name] = val.astype(np.float64)
    r.finish()

    total = sum(i.size for i in indices.values())
    if total != metadata.k:
        raise r.fail(f"vector stores {total} entries but metadata says k={metadata.k}", offset=meta_at)
    return SparseVector(shapes=shapes, classes=classes, indices=indices, values=values, metadata=metadata)


def load_vector(path: PathLike) -> SparseVector:
    return parse_vector(_read(path))


# --- MASK ---

def mask_bytes(mask: BinaryMask) -> bytes:
    w = _Writer(MASK_MAGIC)
    w.uint(w.u32, len(mask.shapes))
    for name, shape in mask.shapes.items():
        idx = mask.support(name)
        w.text(name)
        w.shape(tuple(shape))
        w.uint(w.u64, idx.size)
        w.array(idx, "<u8")
    return w.getvalue()


def save_mask(mask: BinaryMask, path: PathLike) -> Path:
    return atomic_write(path, mask_bytes(mask))


def parse_mask(r: _Reader) -> BinaryMask:
    r.header(MASK_MAGIC)
    shapes: Dict[str, Tuple[int, ...]] = {}
    indices: Dict[str, NDArray[np.int64]] = {}
    for _ in range(r.uint(_Writer.u32)):
        at = r.pos
        name = r.text()
        if name in shapes:
            raise r.fail(f"duplicate tensor {name!r}", offset=at)
        shapes[name] = r.shape()
        count = r.uint(_Writer.u64)
        idx_at = r.pos
        idx = r.array("<u8", count)
        if count:
            if np.any(np.diff(idx.astype(np.int64)) <= 0) or idx[-1] >= _size(shapes[name]):
                raise r.fail(f"indices of tensor {name!r} are unsorted or out of range", offset=idx_at)
            indices[name] = idx.astype(np.int64)
    r.finish()
    return BinaryMask(shapes=shapes, indices=indices)


def load_mask(path: PathLike) -> BinaryMask:
    return parse_mask(_read(path))


# --- CORPUS ---

def corpus_bytes(corpus: Corpus) -> bytes:
    w = _Writer(CORPUS_MAGIC)
    w.uint(w.u32, corpus.vocab_size)
    w.uint(w.i64, corpus.seed)
    w.text(corpus.language_id)
    w.uint(w.u64, len(corpus))
    w.uint(w.u64, corpus.tokens.size)
    w.array(corpus.offsets, "<u8")
    w.array(corpus.tokens, "<u4")
    return w.getvalue()


def save_corpus(corpus: Corpus, path: PathLike) -> Path:
    return atomic_write(path, corpus_bytes(corpus))


def parse_corpus(r: _Reader) -> Corpus:
    r.header(CORPUS_MAGIC)
    vocab_size = r.uint(_Writer.u32)
    seed = r.uint(_Writer.i64)
    language_id = r.text()
    n_sentences = r.uint(_Writer.u64)
    n_tokens = r.uint(_Writer.u64)
    off_at = r.pos
    offsets = r.array("<u8", n_sentences + 1).astype(np.int64)
    tok_at = r.pos
    tokens = r.array("<u4", n_tokens).astype(np.int64)
    r.finish()
    if offsets[0] != 0 or offsets[-1] != n_tokens or np.any(np.diff(offsets) < 0):
        raise r.fail("sentence offsets are not a monotone cover of the token array", offset=off_at)
    if tokens.size and tokens.max() >= vocab_size:
        raise r.fail(f"token id {int(tokens.max())} outside vocab of {vocab_size}", offset=tok_at)
    return Corpus(language_id=language_id, vocab_size=vocab_size, seed=seed, tokens=tokens, offsets=offsets)


def load_corpus(path: PathLike) -> Corpus:
    return parse_corpus(_read(path))


_PARSERS = {
    CHECKPOINT_MAGIC: parse_checkpoint,
    VECTOR_MAGIC: parse_vector,
    MASK_MAGIC: parse_mask,
    CORPUS_MAGIC: parse_corpus,
}


def load_any(path: PathLike) -> Union[ParameterSet, SparseVector, BinaryMask, Corpus]:
    """Dispatches on the file's magic bytes."""
    r = _read(path)
    parser = _PARSERS.get(r.data[:4])
    if parser is None:
        raise r.fail(f"unknown magic {r.data[:4]!r}", offset=0)
    return parser(r)
