"""
Named model parameters and their binary weight file.

File layout (all integers little-endian uint32):

    magic (8 bytes) | format version | entry count |
    per entry: name length | UTF-8 name | rank | extents... | float64 LE data
"""
from __future__ import annotations

import logging
import struct
from collections.abc import MutableMapping
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Optional

import numpy as np

from .errors import BadMagic, ModelFileError, TruncatedFile, UnsupportedVersion

logger = logging.getLogger(__name__)

MAGIC = b"MDCNWTS\x00"
FORMAT_VERSION = 1

# Running normalization statistics are stored with the weights but not trained.
BUFFER_SUFFIXES = (".running_mean", ".running_var")

_UINT32 = struct.Struct("<I")
_FLOAT64 = np.dtype("<f8")


class ModelParams(MutableMapping):
    """
    Ordered mapping from parameter path (e.g. ``backbone.1.0.b0.conv.weight``)
    to a float64 array. Insertion order is the serialization order.
    """

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self._arrays: Dict[str, np.ndarray] = {}
        for name, array in (arrays or {}).items():
            self[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name: str, array) -> None:
        self._arrays[name] = np.array(array, dtype=np.float64)

    def __delitem__(self, name: str) -> None:
        try:
            del self._arrays[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} arrays, {self.size:,} values)"

    @staticmethod
    def is_buffer(name: str) -> bool:
        return name.endswith(BUFFER_SUFFIXES)

    def learnable_names(self) -> Iterable[str]:
        return [name for name in self if not self.is_buffer(name)]

    @property
    def size(self) -> int:
        return sum(array.size for array in self._arrays.values())

    def copy(self) -> ModelParams:
        return ModelParams(self._arrays)

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(self[name]) for name in self.learnable_names()}

    def shapes(self) -> Dict[str, tuple]:
        return {name: array.shape for name, array in self._arrays.items()}

    def bit_equal(self, other: ModelParams) -> bool:
        return list(self) == list(other) and all(
            self[name].shape == other[name].shape
            and self[name].tobytes() == other[name].tobytes()
            for name in self
        )


def serialize(params: ModelParams) -> bytes:
    chunks = [MAGIC, _UINT32.pack(FORMAT_VERSION), _UINT32.pack(len(params))]
    for name, array in params.items():
        encoded = name.encode("utf-8")
        chunks.append(_UINT32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_UINT32.pack(array.ndim))
        chunks.extend(_UINT32.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype=_FLOAT64).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        available = len(self.data) - self.offset
        if n > available:
            raise TruncatedFile(self.offset, n, available)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def uint32(self) -> int:
        (value,) = _UINT32.unpack(self.take(_UINT32.size))
        return value


def deserialize(data: bytes) -> ModelParams:
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagic(f"not a weight file (magic {magic!r} at offset 0)")
    version = reader.uint32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(
            f"weight file format version {version} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    params = ModelParams()
    for _ in range(reader.uint32()):
        name_offset = reader.offset
        try:
            name = reader.take(reader.uint32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelFileError(
                f"invalid parameter name at offset {name_offset}"
            ) from e
        shape = tuple(reader.uint32() for _ in range(reader.uint32()))
        count = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(count * _FLOAT64.itemsize)
        params[name] = np.frombuffer(raw, dtype=_FLOAT64).reshape(shape)
    if reader.offset != len(data):
        raise ModelFileError(f"unexpected trailing bytes at offset {reader.offset}")
    return params


def save_model(params: ModelParams, path: Path):
    path = Path(path)
    path.write_bytes(serialize(params))
    logger.info(
        f"Saved {len(params)} parameter arrays to '{path}' "
        f"({_get_file_size_MiB(path):.2f} MiB)."
    )


def load_model(path: Path) -> ModelParams:
    path = Path(path)
    logger.info(f"Reading model from '{path}' ({_get_file_size_MiB(path):.2f} MiB).")
    return deserialize(path.read_bytes())


def _get_file_size_MiB(path: Path):
    return path.stat().st_size / (1024 * 1024)
