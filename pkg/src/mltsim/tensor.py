"""
Dense tensor substrate: element types, row-major tensors, and the two kernels
the attention block is built from (matrix multiply and row softmax).

All kernels accumulate in a fixed order (inner index ascending) so results are
bit-reproducible, and a row's result never depends on which other rows are
computed alongside it. The tiled executor relies on that.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Sequence, Tuple, Union

import numpy as np


class ElementType(Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    INT8 = "int8"
    INT16 = "int16"
    INT32 = "int32"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTH[self]

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(_NP_DTYPE[self])

    @property
    def is_float(self) -> bool:
        return self in (ElementType.FP32, ElementType.FP16)

    @property
    def is_integer(self) -> bool:
        return not self.is_float

    @property
    def int_range(self) -> Tuple[int, int]:
        if not self.is_integer:
            raise TypeError(f"{self.name} is not an integer type")
        info = np.iinfo(self.np_dtype)
        return int(info.min), int(info.max)

    @property
    def file_tag(self) -> int:
        return _FILE_TAG[self]

    @classmethod
    def parse(cls, name: Union[str, "ElementType"]) -> "ElementType":
        if isinstance(name, ElementType):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown element type {name!r}") from None


_BYTE_WIDTH = {
    ElementType.FP32: 4,
    ElementType.FP16: 2,
    ElementType.INT8: 1,
    ElementType.INT16: 2,
    ElementType.INT32: 4,
}
_NP_DTYPE = {
    ElementType.FP32: np.float32,
    ElementType.FP16: np.float16,
    ElementType.INT8: np.int8,
    ElementType.INT16: np.int16,
    ElementType.INT32: np.int32,
}
_FILE_TAG = {
    ElementType.FP32: 0,
    ElementType.FP16: 1,
    ElementType.INT8: 2,
    ElementType.INT16: 3,
    ElementType.INT32: 4,
}
_TAG_TO_TYPE = {v: k for k, v in _FILE_TAG.items()}

FP16_MAX = 65504.0


class AccumulatorOverflow(ArithmeticError):
    """An integer partial sum left the accumulator's range."""


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable, contiguous, row-major tensor.

    ``data`` is held as a read-only numpy array of the dtype's native type,
    so FP16 values are always exact binary16 numbers.
    """

    shape: Tuple[int, ...]
    dtype: ElementType
    data: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        if not shape or any(s <= 0 for s in shape):
            raise ValueError(f"shape must be non-empty with positive dims, got {shape}")
        arr = np.asarray(self.data)
        if arr.dtype != self.dtype.np_dtype:
            raise TypeError(f"buffer dtype {arr.dtype} does not match {self.dtype.name}")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"buffer has {arr.size} elements, shape {shape} needs {int(np.prod(shape))}")
        arr = np.ascontiguousarray(arr).reshape(shape)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, values, dtype: Union[ElementType, str] = ElementType.FP32) -> "Tensor":
        """Build a tensor from array-like values, converting with :func:`cast` rules."""
        dtype = ElementType.parse(dtype)
        arr = np.asarray(values)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.int64)
            if dtype.is_integer:
                _check_int_range(arr, dtype)
                return cls(arr.shape, dtype, arr.astype(dtype.np_dtype))
            return cls(arr.shape, dtype, _to_float(arr.astype(np.float64), dtype))
        arr = arr.astype(np.float64)
        if dtype.is_integer:
            return cls(arr.shape, dtype, _float_to_int(arr, dtype))
        return cls(arr.shape, dtype, _to_float(arr, dtype))

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.byte_width

    def numpy(self) -> np.ndarray:
        """Read-only view of the element buffer."""
        return self.data

    def rows(self, start: int, count: int) -> "Tensor":
        """Copy of rows ``[start, start + count)`` of a 2-D tensor."""
        if self.rank != 2:
            raise ValueError("rows() needs a 2-D tensor")
        if start < 0 or count <= 0 or start + count > self.shape[0]:
            raise IndexError(f"rows [{start}, {start + count}) outside {self.shape[0]}")
        return Tensor((count, self.shape[1]), self.dtype, self.data[start:start + count].copy())

    def transpose(self) -> "Tensor":
        if self.rank != 2:
            raise ValueError("transpose() needs a 2-D tensor")
        return Tensor((self.shape[1], self.shape[0]), self.dtype, self.data.T.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.dtype, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def _check_int_range(arr: np.ndarray, dtype: ElementType) -> None:
    lo, hi = dtype.int_range
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueError(f"values outside {dtype.name} range [{lo}, {hi}]")


def _float_to_int(arr: np.ndarray, dtype: ElementType) -> np.ndarray:
    if not np.all(np.isfinite(arr)) or not np.all(arr == np.trunc(arr)):
        raise ValueError(f"non-integral values cannot be cast to {dtype.name}; quantize them instead")
    _check_int_range(arr, dtype)
    return arr.astype(dtype.np_dtype)


def _to_float(arr64: np.ndarray, dtype: ElementType) -> np.ndarray:
    """Round-to-nearest-even into ``dtype``; finite overflow saturates to +-max finite."""
    target = dtype.np_dtype
    with np.errstate(over="ignore"):
        out = arr64.astype(target)
    overflow = np.isinf(out) & np.isfinite(arr64)
    if overflow.any():
        out = out.copy()
        out[overflow] = np.copysign(np.finfo(target).max, arr64[overflow]).astype(target)
    return out


def cast(t: Tensor, to: Union[ElementType, str]) -> Tensor:
    """Convert ``t`` to another element type.

    Float targets round to nearest even (binary16 subnormals included) and
    saturate finite out-of-range values. Integer targets accept only integral,
    in-range values.
    """
    to = ElementType.parse(to)
    if to == t.dtype:
        return t
    src = t.data
    if to.is_integer:
        if t.dtype.is_integer:
            wide = src.astype(np.int64)
            _check_int_range(wide, to)
            return Tensor(t.shape, to, wide.astype(to.np_dtype))
        return Tensor(t.shape, to, _float_to_int(src.astype(np.float64), to))
    return Tensor(t.shape, to, _to_float(src.astype(np.float64), to))


def _default_accumulator(a: ElementType) -> ElementType:
    return ElementType.FP32 if a.is_float else ElementType.INT32


def matmul(
    a: Tensor,
    b: Tensor,
    accumulate_type: Union[ElementType, str, None] = None,
    out_dtype: Union[ElementType, str, None] = None,
) -> Tensor:
    """``c[i, j] = sum_t a[i, t] * b[t, j]`` with t ascending.

    Each partial product is formed and rounded in ``accumulate_type`` before
    being added, so a row of ``c`` depends only on the matching row of ``a``.
    Floating results are narrowed to ``out_dtype`` (default: ``a.dtype``);
    integer results stay in the accumulator type. Integer accumulation raises
    :class:`AccumulatorOverflow` instead of wrapping.
    """
    if a.rank != 2 or b.rank != 2:
        raise ValueError("matmul needs 2-D operands")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype.is_float != b.dtype.is_float:
        raise TypeError("matmul operands must be both floating or both integer")
    acc = ElementType.parse(accumulate_type) if accumulate_type is not None else _default_accumulator(a.dtype)
    if acc.is_float != a.dtype.is_float:
        raise TypeError(f"accumulator {acc.name} does not match operand kind")

    if acc.is_float:
        out = ElementType.parse(out_dtype) if out_dtype is not None else a.dtype
        if not out.is_float:
            raise TypeError("floating matmul must produce a floating tensor")
        return Tensor((m, n), out, _to_float(_float_accumulate(a.data, b.data, acc).astype(np.float64), out))

    if out_dtype is not None and ElementType.parse(out_dtype) != acc:
        raise TypeError("integer matmul produces its accumulator type")
    return Tensor((m, n), acc, int_accumulate(a.data, b.data, acc).astype(acc.np_dtype))


def _float_accumulate(a: np.ndarray, b: np.ndarray, acc: ElementType) -> np.ndarray:
    acc_np = acc.np_dtype
    aa = a.astype(acc_np)
    bb = b.astype(acc_np)
    c = aa[:, 0:1] * bb[0:1, :]
    for t in range(1, aa.shape[1]):
        # numpy rounds every float16 op back to binary16
        c = c + aa[:, t:t + 1] * bb[t:t + 1, :]
    return c


def int_accumulate(a: np.ndarray, b: np.ndarray, acc: ElementType) -> np.ndarray:
    """Integer product with every partial sum range-checked against ``acc``."""
    lo, hi = acc.int_range
    aa = a.astype(np.int64)
    bb = b.astype(np.int64)
    c = np.zeros((aa.shape[0], bb.shape[1]), dtype=np.int64)
    for t in range(aa.shape[1]):
        c += aa[:, t:t + 1] * bb[t:t + 1, :]
        if c.size and (c.min() < lo or c.max() > hi):
            raise AccumulatorOverflow(f"partial sum at inner index {t} exceeds {acc.name} range")
    return c


def softmax_rows(s_in: Tensor) -> Tensor:
    """Numerically safe softmax over the last axis of a 2-D floating tensor.

    Computed in FP32 (FP16 inputs are widened, the result narrowed back).
    """
    if not s_in.dtype.is_float:
        raise TypeError(f"softmax_rows needs a floating tensor, got {s_in.dtype.name}")
    if s_in.rank != 2:
        raise ValueError("softmax_rows needs a 2-D tensor")
    x = s_in.data.astype(np.float32)
    row_max = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        row_max = np.maximum(row_max, x[:, j])
    e = np.exp(x - row_max[:, None])
    total = e[:, 0].copy()
    for j in range(1, e.shape[1]):
        total = total + e[:, j]
    y = e / total[:, None]
    return Tensor(s_in.shape, s_in.dtype, _to_float(y.astype(np.float64), s_in.dtype))


def scale(t: Tensor, factor: float) -> Tensor:
    """Elementwise multiply of a floating tensor by a scalar, rounded in ``t.dtype``."""
    if not t.dtype.is_float:
        raise TypeError("scale() needs a floating tensor")
    y = t.data.astype(np.float32) * np.float32(factor)
    return Tensor(t.shape, t.dtype, _to_float(y.astype(np.float64), t.dtype))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("nothing to concatenate")
    dtype = parts[0].dtype
    if any(p.dtype != dtype or p.rank != 2 or p.shape[1] != parts[0].shape[1] for p in parts):
        raise ValueError("row blocks must share dtype and column count")
    data = np.concatenate([p.data for p in parts], axis=0)
    return Tensor(data.shape, dtype, data)


# -- TNSR1 binary format -----------------------------------------------------

MAGIC = b"TNSR1"


def write_tensor(t: Tensor, dest: Union[str, Path, BinaryIO]) -> None:
    header = MAGIC + struct.pack("<BB", t.dtype.file_tag, t.rank) + struct.pack(f"<{t.rank}Q", *t.shape)
    payload = t.data.astype(t.dtype.np_dtype.newbyteorder("<"), copy=False).tobytes()
    if hasattr(dest, "write"):
        dest.write(header + payload)
    else:
        Path(dest).write_bytes(header + payload)


def read_tensor(src: Union[str, Path, BinaryIO, bytes]) -> Tensor:
    if isinstance(src, bytes):
        raw = src
    elif hasattr(src, "read"):
        raw = src.read()
    else:
        raw = Path(src).read_bytes()
    if len(raw) < 7 or raw[:5] != MAGIC:
        raise ValueError("not a TNSR1 file")
    tag, rank = struct.unpack_from("<BB", raw, 5)
    if tag not in _TAG_TO_TYPE:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _TAG_TO_TYPE[tag]
    offset = 7 + 8 * rank
    if len(raw) < offset:
        raise ValueError("truncated TNSR1 header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 7)
    count = int(np.prod(shape)) if rank else 0
    expected = offset + count * dtype.byte_width
    if len(raw) != expected:
        raise ValueError(f"TNSR1 payload is {len(raw) - offset} bytes, expected {expected - offset}")
    data = np.frombuffer(raw, dtype=dtype.np_dtype.newbyteorder("<"), count=count, offset=offset)
    return Tensor(shape, dtype, data.astype(dtype.np_dtype))
