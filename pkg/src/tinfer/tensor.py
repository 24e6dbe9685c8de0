"""Dense row-major tensor type, dual-precision kernels, and TINF v1 files.

Storage is either 32-bit or 16-bit IEEE floats. Half-precision follows
the mixed-precision convention: values live in 16 bits, every kernel
accumulates in 32 bits, and results round to the target precision with
round-to-nearest-even (saturating at the f16 finite range instead of
overflowing to inf).
"""

from __future__ import annotations

import enum
import struct
from typing import BinaryIO, Iterable

import numpy as np

from . import kernels
from .errors import (
    DimensionError,
    FormatError,
    NumericError,
    PrecisionError,
)

F16_MAX = 65504.0


class DType(enum.Enum):
    F32 = "F32"
    F16 = "F16"

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is DType.F32 else np.dtype(np.float16)

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @classmethod
    def from_name(cls, name: str) -> "DType":
        try:
            return cls(name)
        except ValueError:
            raise FormatError(f"unknown dtype name {name!r}") from None


class Tensor:
    """Immutable-by-convention dense array with an explicit precision tag.

    ``array`` is always C-contiguous in the numpy dtype matching ``dtype``;
    ``data`` exposes the flat row-major scalars the wire format stores.
    """

    __slots__ = ("array", "dtype")

    def __init__(self, array: np.ndarray, dtype: DType | None = None):
        if dtype is None:
            if array.dtype == np.float32:
                dtype = DType.F32
            elif array.dtype == np.float16:
                dtype = DType.F16
            else:
                raise PrecisionError(f"unsupported array dtype {array.dtype}")
        if array.ndim == 0 or array.size == 0 or any(e < 1 for e in array.shape):
            raise DimensionError(f"invalid tensor shape {array.shape}")
        self.array = np.ascontiguousarray(array, dtype=dtype.np_dtype)
        self.dtype = dtype

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    @property
    def nbytes(self) -> int:
        return self.array.size * self.dtype.itemsize

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.value})"

    @classmethod
    def from_list(cls, values, dtype: DType = DType.F32) -> "Tensor":
        return cls(np.asarray(values, dtype=np.float64).astype(dtype.np_dtype))


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return arr if arr.dtype == np.float32 else arr.astype(np.float32)


def round_to(arr_f32: np.ndarray, target: DType) -> np.ndarray:
    """Round an f32 array to the target precision (saturating for F16)."""
    if target is DType.F32:
        return arr_f32
    # clip keeps overflow at +-F16_MAX; in-range values round to nearest even
    return np.clip(arr_f32, -F16_MAX, F16_MAX).astype(np.float16)


def cast(t: Tensor, target: DType) -> Tensor:
    """Precision conversion; f32->f16 rounds to nearest even and saturates."""
    if t.dtype is target:
        return t
    if target is DType.F32:
        return Tensor(t.array.astype(np.float32), DType.F32)
    return Tensor(round_to(t.array, DType.F16), DType.F16)


def gemm(a: Tensor, b: Tensor, bias: Tensor | None = None,
         out_dtype: DType | None = None) -> Tensor:
    """out[i,j] = sum_k a[i,k]*b[k,j] (+ bias[j]), f32 accumulation.

    Operands must share a dtype; the result rounds to ``out_dtype``
    (defaults to the operand dtype).
    """
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise DimensionError("gemm expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"gemm inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype is not b.dtype:
        raise PrecisionError(
            f"gemm operands must share a dtype, got {a.dtype.value} and {b.dtype.value}")
    if out_dtype is None:
        out_dtype = a.dtype
    n = b.shape[1]
    bias_arr = None
    if bias is not None:
        if bias.dtype is not a.dtype:
            raise PrecisionError("bias dtype must match operands")
        if bias.array.ndim != 1 or bias.shape[0] != n:
            raise DimensionError(f"bias must have length {n}")
        bias_arr = _as_f32(bias.array)
    out = kernels.gemm_f32(_as_f32(a.array), _as_f32(b.array), bias_arr)
    return Tensor(round_to(out, out_dtype), out_dtype)


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; f32 internal math."""
    if t.array.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-D tensor")
    x = _as_f32(t.array)
    if not np.isfinite(x).all():
        raise NumericError("softmax_rows requires finite inputs")
    out = np.empty_like(x)
    kernels.softmax_rows_kernel(x, out)
    return Tensor(round_to(out, t.dtype), t.dtype)


def layer_norm_f32(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                   eps: float) -> np.ndarray:
    """Row normalization on raw f32 arrays (engine-internal fast path)."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    return centered * inv * gamma + beta


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean unit-variance normalization, scaled and shifted."""
    if t.array.ndim != 2:
        raise DimensionError("layer_norm expects a 2-D tensor")
    n = t.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError("gamma/beta must match the row width")
    out = layer_norm_f32(_as_f32(t.array), _as_f32(gamma.array),
                         _as_f32(beta.array), eps)
    return Tensor(round_to(out.astype(np.float32, copy=False), t.dtype), t.dtype)


# ---------------------------------------------------------------------------
# TINF v1 weight files
# ---------------------------------------------------------------------------

_MAGIC = b"TINF"
_VERSION = 1
_DTYPE_CODE = {DType.F32: 0, DType.F16: 1}
_CODE_DTYPE = {0: DType.F32, 1: DType.F16}


def write_tinf(path: str, tensors: Iterable[tuple[str, Tensor]]) -> None:
    items = list(tensors)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(items)))
        for name, t in items:
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise FormatError("tensor name too long")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_CODE[t.dtype], t.array.ndim))
            fh.write(struct.pack(f"<{t.array.ndim}Q", *t.shape))
            le = t.array.astype(t.array.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated TINF file")
    return buf


def read_tinf(path: str) -> list[tuple[str, Tensor]]:
    out: list[tuple[str, Tensor]] = []
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise FormatError("not a TINF file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != _VERSION:
            raise FormatError(f"unsupported TINF version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _CODE_DTYPE:
                raise FormatError(f"unknown dtype code {code}")
            dtype = _CODE_DTYPE[code]
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            n_elems = 1
            for e in shape:
                n_elems *= e
            raw = _read_exact(fh, n_elems * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype.np_dtype.newbyteorder("<"))
            arr = arr.astype(dtype.np_dtype).reshape(shape)
            out.append((name, Tensor(arr, dtype)))
    return out
