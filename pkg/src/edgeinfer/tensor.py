"""Typed n-dimensional arrays with explicit precision and linear quantization.

Three element precisions exist: FP32, FP16 (IEEE binary16 bit patterns) and
symmetric signed INT8 in [-127, 127] with zero_point fixed at 0.  All rounding
is round-half-to-even so results are deterministic across platforms.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InvalidQuantParamsError,
    InvalidTensorError,
    UnsupportedCastError,
)

FP16_MAX = 65504.0  # largest finite binary16 value
INT8_QMAX = 127     # symmetric range [-127, 127]; -128 is never produced


class DType(enum.Enum):
    FP32 = "fp32"
    FP16 = "fp16"
    INT8 = "int8"

    @property
    def itemsize(self) -> int:
        return {DType.FP32: 4, DType.FP16: 2, DType.INT8: 1}[self]

    @property
    def np_dtype(self):
        return {
            DType.FP32: np.float32,
            DType.FP16: np.float16,
            DType.INT8: np.int8,
        }[self]

    @property
    def is_float(self) -> bool:
        return self in (DType.FP32, DType.FP16)


@dataclass(frozen=True)
class QuantParams:
    """Scale metadata for symmetric INT8 tensors.

    ``scale`` is real-units per integer step.  When ``axis`` is set the tensor
    is quantized per channel along that axis and ``scales`` holds one scale
    per channel; ``scale`` is then unused.
    """

    scale: float = 0.0
    axis: Optional[int] = None
    scales: Optional[tuple[float, ...]] = None
    zero_point: int = field(default=0, init=False)  # symmetric scheme only

    def __post_init__(self):
        if self.axis is None:
            if not (self.scale > 0 and math.isfinite(self.scale)):
                raise InvalidQuantParamsError(
                    f"scale must be a positive finite real, got {self.scale}"
                )
        else:
            if not self.scales:
                raise InvalidQuantParamsError("per-channel params need scales")
            if any(not (s > 0 and math.isfinite(s)) for s in self.scales):
                raise InvalidQuantParamsError("per-channel scales must be positive")

    def scale_vector(self, shape: Sequence[int]) -> np.ndarray:
        """Scales broadcast to ``shape`` (per-tensor or along ``axis``)."""
        if self.axis is None:
            return np.float64(self.scale)
        if len(self.scales) != shape[self.axis]:
            raise InvalidQuantParamsError(
                f"{len(self.scales)} scales for axis {self.axis} of extent "
                f"{shape[self.axis]}"
            )
        vec = np.asarray(self.scales, dtype=np.float64)
        expand = [1] * len(shape)
        expand[self.axis] = len(self.scales)
        return vec.reshape(expand)


@dataclass(frozen=True)
class Tensor:
    """Immutable row-major array with explicit precision.

    INT8 tensors always carry QuantParams; floating tensors never do.
    """

    shape: tuple[int, ...]
    dtype: DType
    data: np.ndarray
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        if any(d <= 0 for d in self.shape):
            raise InvalidTensorError(f"non-positive dimension in shape {self.shape}")
        if self.data.size != int(np.prod(self.shape)):
            raise InvalidTensorError(
                f"buffer of {self.data.size} elements does not match shape {self.shape}"
            )
        if self.data.dtype != self.dtype.np_dtype:
            raise InvalidTensorError(
                f"buffer dtype {self.data.dtype} does not match {self.dtype}"
            )
        if self.dtype is DType.INT8 and self.quant is None:
            raise InvalidTensorError("INT8 tensors require QuantParams")
        if self.dtype is not DType.INT8 and self.quant is not None:
            raise InvalidTensorError("floating tensors must not carry QuantParams")
        arr = self.data.reshape(self.shape)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @staticmethod
    def from_array(arr, dtype: DType = DType.FP32,
                   quant: Optional[QuantParams] = None) -> "Tensor":
        a = np.ascontiguousarray(arr, dtype=dtype.np_dtype)
        return Tensor(tuple(a.shape), dtype, a, quant)

    def to_float32(self) -> np.ndarray:
        """Real-valued view: dequantizes INT8, upcasts FP16 exactly."""
        if self.dtype is DType.INT8:
            scale = self.quant.scale_vector(self.shape)
            return (self.data.astype(np.float64) * scale).astype(np.float32)
        return self.data.astype(np.float32)


def round_to_fp16(values: np.ndarray) -> np.ndarray:
    """FP32 -> FP16 with round-to-nearest-even, saturating overflow to ±max.

    numpy's cast already rounds to nearest-even but overflows to ±inf; finite
    inputs that overflow are clamped to ±65504 instead.  NaN passes through.
    """
    src = np.asarray(values, dtype=np.float32)
    with np.errstate(over="ignore"):
        out = src.astype(np.float16)
    overflow = np.isinf(out) & np.isfinite(src)
    if np.any(overflow):
        out = np.where(overflow, np.sign(src).astype(np.float16) * np.float16(FP16_MAX), out)
    return out


def cast(t: Tensor, target: DType) -> Tensor:
    """Precision conversion between the floating formats.

    Integer conversions go through quantize_linear / dequantize_linear.
    """
    if not t.dtype.is_float or not target.is_float:
        raise UnsupportedCastError(
            f"cast supports only floating dtypes, got {t.dtype.value} -> {target.value}"
        )
    if target is t.dtype:
        return t
    if target is DType.FP16:
        return Tensor(t.shape, DType.FP16, round_to_fp16(t.data))
    return Tensor(t.shape, DType.FP32, t.data.astype(np.float32))  # exact


def quantize_array(values: np.ndarray, q: QuantParams) -> np.ndarray:
    """round-half-to-even(x / scale) clamped to [-127, 127], as int8."""
    scale = q.scale_vector(np.asarray(values).shape)
    scaled = np.asarray(values, dtype=np.float64) / scale
    return np.clip(np.rint(scaled), -INT8_QMAX, INT8_QMAX).astype(np.int8)


def quantize_linear(t: Tensor, q: QuantParams) -> Tensor:
    if t.dtype is not DType.FP32:
        raise UnsupportedCastError(f"quantize_linear expects FP32 input, got {t.dtype.value}")
    return Tensor(t.shape, DType.INT8, quantize_array(t.data, q), q)


def dequantize_linear(t: Tensor) -> Tensor:
    if t.dtype is not DType.INT8 or t.quant is None:
        raise InvalidTensorError("dequantize_linear expects an INT8 tensor with QuantParams")
    scale = t.quant.scale_vector(t.shape)
    real = (t.data.astype(np.float64) * scale).astype(np.float32)
    return Tensor(t.shape, DType.FP32, real)
