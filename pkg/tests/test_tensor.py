import struct

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from edgeinfer.errors import InvalidQuantParamsError, InvalidTensorError, UnsupportedCastError
from edgeinfer.tensor import (DType, FP16_MAX, INT8_QMAX, QuantParams, Tensor,
                              cast, dequantize_linear, quantize_array,
                              quantize_linear, round_to_fp16)


def struct_fp16(x):
    """Independent binary16 oracle via CPython's struct 'e' format."""
    return struct.unpack("<e", struct.pack("<e", x))[0]


def test_dtype_widths():
    assert DType.FP32.itemsize == 4
    assert DType.FP16.itemsize == 2
    assert DType.INT8.itemsize == 1


def test_fp16_round_to_nearest_even():
    # ulp at 1.0 is 2^-10; the exact midpoint rounds to even (down)
    mid = 1.0 + 2.0 ** -11
    assert round_to_fp16(np.float32(mid)) == struct_fp16(mid) == 1.0
    # above the midpoint rounds up
    up = 1.0 + 2.0 ** -11 + 2.0 ** -20
    assert round_to_fp16(np.float32(up)) == struct_fp16(up)
    assert round_to_fp16(np.float32(2049.0)) == struct_fp16(2049.0) == 2048.0


def test_fp16_overflow_saturates():
    # struct raises OverflowError here; our conversion saturates instead
    assert round_to_fp16(np.float32(65520.0)) == FP16_MAX
    assert round_to_fp16(np.float32(-70000.0)) == -FP16_MAX
    assert round_to_fp16(np.float32(1e30)) == FP16_MAX


def test_fp16_preserves_infinities_and_nan():
    assert np.isposinf(round_to_fp16(np.float32(np.inf)))
    assert np.isneginf(round_to_fp16(np.float32(-np.inf)))
    assert np.isnan(round_to_fp16(np.float32(np.nan)))


@settings(max_examples=200)
@given(st.floats(min_value=-60000, max_value=60000, allow_nan=False, width=32))
def test_fp16_matches_struct_oracle(x):
    assert float(round_to_fp16(np.float32(x))) == struct_fp16(x)


def test_cast_fp32_to_fp16_and_back():
    t = Tensor.from_array(np.array([1.0 + 2.0 ** -20], dtype=np.float32))
    h = cast(t, DType.FP16)
    assert h.dtype == DType.FP16
    assert h.to_float32()[0] == 1.0  # precision loss on the way down
    back = cast(h, DType.FP32)      # exact on the way up
    assert back.data[0] == np.float32(1.0)


def test_cast_rejects_integer_dtypes():
    t = Tensor.from_array(np.zeros(4, dtype=np.float32))
    with pytest.raises(UnsupportedCastError):
        cast(t, DType.INT8)
    q = quantize_linear(t, QuantParams(scale=1.0))
    with pytest.raises(UnsupportedCastError):
        cast(q, DType.FP32)


def test_quantize_example_channel():
    # weight channel [-0.5, 0.25]: scale = 0.5/127, quantized [-127, 64]
    q = QuantParams(scale=0.5 / 127)
    vals = quantize_array(np.array([-0.5, 0.25], dtype=np.float32), q)
    assert vals.dtype == np.int8
    assert list(vals) == [-127, 64]  # 63.5 rounds half-to-even up to 64


def test_quantize_round_half_even():
    q = QuantParams(scale=1.0)
    vals = quantize_array(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), q)
    assert list(vals) == [0, 2, 2, 0, -2]


def test_quantize_saturates_at_bounds():
    q = QuantParams(scale=0.5 / 127)
    vals = quantize_array(np.array([-1e9, 1e9, -0.5000001, 0.5000001]), q)
    assert list(vals) == [-127, 127, -127, 127]
    assert vals.min() >= -INT8_QMAX  # -128 never appears


def test_zero_point_is_fixed():
    q = QuantParams(scale=0.25)
    assert q.zero_point == 0
    assert quantize_array(np.array([0.0]), q)[0] == 0


def test_quant_params_validate():
    with pytest.raises(InvalidQuantParamsError):
        QuantParams(scale=0.0)
    with pytest.raises(InvalidQuantParamsError):
        QuantParams(scale=-1.0)
    with pytest.raises(InvalidQuantParamsError):
        QuantParams(scale=float("nan"))
    with pytest.raises(InvalidQuantParamsError):
        QuantParams(axis=0, scales=(1.0, -2.0))


@settings(max_examples=200)
@given(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
       st.floats(min_value=1e-4, max_value=1.0, allow_nan=False))
def test_round_trip_error_bound(x, rng):
    # |dequantize(quantize(x)) - x| <= scale/2 for in-range x
    scale = rng / 127
    t = Tensor.from_array(np.array([x * rng], dtype=np.float32))
    q = quantize_linear(t, QuantParams(scale=scale))
    back = dequantize_linear(q)
    assert abs(float(back.data[0]) - x * rng) <= scale / 2 + 1e-7


def test_tensor_validates_buffer():
    with pytest.raises(InvalidTensorError):
        Tensor(shape=(2, 2), dtype=DType.FP32, data=np.zeros(3, dtype=np.float32))
    with pytest.raises(InvalidTensorError):
        Tensor(shape=(4,), dtype=DType.INT8, data=np.zeros(4, dtype=np.int8))  # no quant


def test_tensor_is_immutable():
    t = Tensor.from_array(np.zeros(4, dtype=np.float32))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
