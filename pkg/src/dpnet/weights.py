"""Named weight slots, the weight store, and the ``DPNW`` binary format.

File layout (little-endian)::

    magic   4 bytes  b"DPNW"
    version u32      1
    count   u32
    count x entry:
        name_len u16, name (UTF-8)
        dtype u8 (0 = f32, 1 = f64), rank u8, dims u32 * rank
        raw values, row-major
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Optional, Union

import numpy as np

from dpnet.tensor import Tensor

MAGIC = b"DPNW"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class WeightFormatError(ValueError):
    """Malformed or unreadable weight file."""


@dataclass(frozen=True)
class Slot:
    """Declaration of one named weight tensor.

    ``kind`` is ``"param"`` for trainable values and ``"buffer"`` for running
    statistics. ``decay`` marks params subject to weight decay.
    """

    name: str
    shape: tuple
    init: str = "kaiming"
    fan_in: int = 1
    kind: str = "param"
    decay: bool = True
    value: float = 0.0

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class WeightStore(dict):
    """Map from unique, non-empty UTF-8 name to :class:`Tensor`."""

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        if not isinstance(name, str) or not name:
            raise ValueError(f"weight name must be a non-empty string, got {name!r}")
        name.encode("utf-8")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        super().__setitem__(name, tensor)

    def require(self, name: str) -> Tensor:
        try:
            return self[name]
        except KeyError:
            raise KeyError(f"missing weight {name!r}") from None

    def astype(self, dtype) -> "WeightStore":
        out = WeightStore()
        for k, v in self.items():
            out[k] = Tensor(v.data.astype(dtype))
        return out

    def set_requires_grad(self, flag: bool, slots: Optional[Iterable[Slot]] = None) -> None:
        names = None if slots is None else {s.name for s in slots if s.kind == "param"}
        for k, v in self.items():
            v.requires_grad = flag and (names is None or k in names)


def init_store(slots: Iterable[Slot], seed: int = 0, dtype=np.float32) -> WeightStore:
    """Initialise every slot; slots are visited in declaration order so the result is seed-deterministic."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for s in slots:
        if s.name in store:
            raise ValueError(f"duplicate weight name {s.name!r}")
        if s.init == "kaiming":
            bound = math.sqrt(6.0 / max(s.fan_in, 1))
            data = rng.uniform(-bound, bound, size=s.shape)
        elif s.init == "zeros":
            data = np.zeros(s.shape)
        elif s.init == "ones":
            data = np.ones(s.shape)
        elif s.init == "constant":
            data = np.full(s.shape, s.value)
        else:
            raise ValueError(f"unknown init {s.init!r} for {s.name}")
        store[s.name] = Tensor(data.astype(dtype))
    return store


# -- binary IO ------------------------------------------------------------------


def save_weights(store: Mapping[str, Tensor], path: Union[str, Path, BinaryIO]) -> None:
    for name, t in store.items():
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"weight {name!r} has non-finite values")
    if hasattr(path, "write"):
        _write(store, path)
    else:
        with open(path, "wb") as fh:
            _write(store, fh)


def _write(store: Mapping[str, Tensor], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(store)))
    for name, t in store.items():
        raw = name.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValueError(f"weight name {name!r} has invalid length")
        arr = t.data
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ValueError(f"weight {name!r}: unsupported dtype {arr.dtype}")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_weights(path: Union[str, Path, BinaryIO]) -> WeightStore:
    if hasattr(path, "read"):
        blob = path.read()
    else:
        blob = Path(path).read_bytes()
    return decode_weights(blob)


def decode_weights(blob: bytes) -> WeightStore:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}, expected {VERSION}")
    store = WeightStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"weight name is not UTF-8: {exc}") from None
        if not name:
            raise WeightFormatError("empty weight name")
        code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name!r}"))
        if code not in _CODE_DTYPES:
            raise WeightFormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        dt = _CODE_DTYPES[code]
        nbytes = math.prod(dims) * dt.itemsize
        data = np.frombuffer(take(nbytes, f"values of {name!r}"), dtype=dt).reshape(dims)
        if name in store:
            raise WeightFormatError(f"duplicate weight name {name!r}")
        store[name] = Tensor(data.astype(dt.newbyteorder("="), copy=True))
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after {count} entries")
    return store
