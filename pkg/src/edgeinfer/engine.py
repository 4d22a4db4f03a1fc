"""Graph executor: reference kernels, image preprocessing, classification.

Numeric contracts per precision:

* FP32 - float32 arithmetic throughout.
* FP16 - each op computes in FP32 on exactly-upcast inputs, then rounds the
  result to binary16 (round-to-nearest-even, saturating).  This emulates
  mixed-precision hardware deterministically on CPU.
* INT8 - convolutions and matmuls accumulate in 32-bit integers; every op
  boundary requantizes to the consumer scale with round-half-to-even using a
  precomputed real multiplier.  Folded biases are added to the accumulator as
  int32 values at in_scale * w_scale before the single requantization.

Convolutions are direct (no im2col, no FFT): the kernel loops over filter
taps and accumulates strided input slices.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .bundle import ModelBundle, PreprocessSpec
from .errors import (
    DTypeMismatchError,
    GraphError,
    ImageDecodeError,
    ShapeMismatchError,
)
from .graph import Graph, Node, OpKind, infer_dtypes, same_padding, valid_out
from .tensor import (
    DType,
    INT8_QMAX,
    QuantParams,
    Tensor,
    cast,
    quantize_linear,
    dequantize_linear,
    round_to_fp16,
)

# Forward-pass counter, used by the feature cache tests to prove cache hits
# execute zero forwards.
FORWARD_RUNS = 0


# ---------------------------------------------------------------------------
# float kernels (inputs/outputs are float32 ndarrays)

def conv2d(x: np.ndarray, w: np.ndarray, strides=(1, 1), padding="VALID",
           bias: np.ndarray | None = None) -> np.ndarray:
    """Direct NHWC convolution; kernel layout (kh, kw, in_c, out_c)."""
    xp, oh, ow = _pad_for_conv(x, w.shape[0], w.shape[1], strides, padding)
    sh, sw = strides
    acc = np.zeros((x.shape[0], oh, ow, w.shape[3]), dtype=np.float32)
    for di in range(w.shape[0]):
        for dj in range(w.shape[1]):
            patch = xp[:, di:di + oh * sh:sh, dj:dj + ow * sw:sw, :]
            acc += np.tensordot(patch, w[di, dj], axes=([3], [0]))
    if bias is not None:
        acc += bias.astype(np.float32)
    return acc


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, strides=(1, 1),
                     padding="VALID", bias: np.ndarray | None = None) -> np.ndarray:
    """Direct depthwise convolution; kernel (kh, kw, channels, multiplier).
    Output channel order is c * multiplier + m."""
    kh, kw, c, m = w.shape
    xp, oh, ow = _pad_for_conv(x, kh, kw, strides, padding)
    sh, sw = strides
    acc = np.zeros((x.shape[0], oh, ow, c, m), dtype=np.float32)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, di:di + oh * sh:sh, dj:dj + ow * sw:sw, :]
            acc += patch[..., None] * w[di, dj]
    out = acc.reshape(x.shape[0], oh, ow, c * m)
    if bias is not None:
        out = out + bias.astype(np.float32)
    return out


def matmul(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = x @ w
    if bias is not None:
        out = out + bias.astype(np.float32)
    return out


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def mean_over(x: np.ndarray, axes, keep_dims=False) -> np.ndarray:
    return np.mean(x, axis=tuple(axes), keepdims=keep_dims, dtype=np.float32)


def zero_pad(x: np.ndarray, paddings) -> np.ndarray:
    return np.pad(x, paddings, mode="constant")


def _pad_for_conv(x, kh, kw, strides, padding):
    sh, sw = strides
    if padding == "SAME":
        oh, ph0, ph1 = same_padding(x.shape[1], kh, sh)
        ow, pw0, pw1 = same_padding(x.shape[2], kw, sw)
        xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)), mode="constant")
    elif padding == "VALID":
        oh = valid_out(x.shape[1], kh, sh)
        ow = valid_out(x.shape[2], kw, sw)
        xp = x
    else:
        raise GraphError(f"unknown padding {padding!r}")
    return xp, oh, ow


# ---------------------------------------------------------------------------
# int8 helpers

def _requant(acc: np.ndarray, multiplier) -> np.ndarray:
    """int32 accumulator (or real values) -> int8 via round-half-to-even."""
    scaled = acc.astype(np.float64) * multiplier
    return np.clip(np.rint(scaled), -INT8_QMAX, INT8_QMAX).astype(np.int8)


def _requant_real(real: np.ndarray, out_scale: float) -> np.ndarray:
    return np.clip(np.rint(np.asarray(real, dtype=np.float64) / out_scale),
                   -INT8_QMAX, INT8_QMAX).astype(np.int8)


def conv2d_int8(x_q, w_q, s_in, w_scales, out_scale, strides, padding,
                bias_q=None, depthwise=False):
    """Integer convolution with int32 accumulation and one requantization.

    w_scales is per-output-channel (depthwise: per input channel, shared
    across the multiplier).  bias_q, when given, is int32 at in_scale*w_scale.
    """
    xi = x_q.astype(np.int32)
    if depthwise:
        kh, kw, c, m = w_q.shape
        xp, oh, ow = _pad_for_conv(xi, kh, kw, strides, padding)
        sh, sw = strides
        acc = np.zeros((xi.shape[0], oh, ow, c, m), dtype=np.int32)
        wi = w_q.astype(np.int32)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[:, di:di + oh * sh:sh, dj:dj + ow * sw:sw, :]
                acc += patch[..., None] * wi[di, dj]
        acc = acc.reshape(xi.shape[0], oh, ow, c * m)
        per_out = np.repeat(np.asarray(w_scales, dtype=np.float64), m)
    else:
        xp, oh, ow = _pad_for_conv(xi, w_q.shape[0], w_q.shape[1], strides, padding)
        sh, sw = strides
        acc = np.zeros((xi.shape[0], oh, ow, w_q.shape[3]), dtype=np.int32)
        wi = w_q.astype(np.int32)
        for di in range(w_q.shape[0]):
            for dj in range(w_q.shape[1]):
                patch = xp[:, di:di + oh * sh:sh, dj:dj + ow * sw:sw, :]
                acc += np.tensordot(patch, wi[di, dj], axes=([3], [0]))
        per_out = np.asarray(w_scales, dtype=np.float64)
    if bias_q is not None:
        acc = acc + bias_q.astype(np.int32)
    multipliers = s_in * per_out / out_scale
    return _requant(acc, multipliers)


def matmul_int8(x_q, w_q, s_in, w_scales, out_scale, bias_q=None):
    acc = x_q.astype(np.int32) @ w_q.astype(np.int32)
    if bias_q is not None:
        acc = acc + bias_q.astype(np.int32)
    multipliers = s_in * np.asarray(w_scales, dtype=np.float64) / out_scale
    return _requant(acc, multipliers)


# ---------------------------------------------------------------------------
# graph execution

def run_forward(b: ModelBundle, input_tensor: Tensor) -> dict[str, Tensor]:
    """Executes the bundle graph; returns every node's output tensor."""
    global FORWARD_RUNS
    FORWARD_RUNS += 1
    g = b.graph
    dtypes = infer_dtypes(g)
    values: dict[str, Tensor] = {}
    for n in g.nodes:
        if n.op is OpKind.Input:
            spec = g.input_specs[n.id]
            if tuple(input_tensor.shape[1:]) != tuple(spec.shape[1:]):
                raise ShapeMismatchError(
                    f"input {input_tensor.shape} does not match spec {spec.shape}"
                )
            if input_tensor.dtype is not spec.dtype:
                raise DTypeMismatchError(
                    f"input dtype {input_tensor.dtype.value}, expected {spec.dtype.value}"
                )
            values[n.id] = input_tensor
        elif n.op is OpKind.Const:
            values[n.id] = _const_tensor(g, n)
        else:
            values[n.id] = _eval_node(g, n, values, dtypes[n.id])
    return values


def _const_tensor(g: Graph, n: Node) -> Tensor:
    entry = g.weights[n.weight_ref]
    if entry.dtype == "int8":
        return Tensor.from_array(entry.array, DType.INT8, entry.quant)
    return Tensor.from_array(entry.array, DType(entry.dtype))


def _eval_node(g: Graph, n: Node, values: dict[str, Tensor], out_dtype: DType) -> Tensor:
    ins = [values[i] for i in n.inputs]
    if n.op is OpKind.Cast:
        return _eval_cast(n, ins[0])
    if out_dtype is DType.INT8:
        return _eval_int8(g, n, ins)
    return _eval_float(g, n, ins, out_dtype)


def _eval_cast(n: Node, t: Tensor) -> Tensor:
    target = DType(n.attrs["to"])
    if target is DType.INT8:
        if t.dtype is not DType.FP32:
            raise DTypeMismatchError(
                f"Cast {n.id!r}: quantizing boundary expects FP32, got {t.dtype.value}"
            )
        return quantize_linear(t, QuantParams(scale=float(n.attrs["scale"])))
    if t.dtype is DType.INT8:
        if target is not DType.FP32:
            raise DTypeMismatchError(f"Cast {n.id!r}: INT8 may only cast to FP32")
        return dequantize_linear(t)
    return cast(t, target)


def _eval_float(g: Graph, n: Node, ins: list[Tensor], out_dtype: DType) -> Tensor:
    xs = [t.data.astype(np.float32) for t in ins]
    bias = _bias_array(g, n)
    if n.op is OpKind.Conv2D:
        out = conv2d(xs[0], xs[1], n.attrs.get("strides", (1, 1)),
                     n.attrs.get("padding", "VALID"), bias)
    elif n.op is OpKind.DepthwiseConv2D:
        out = depthwise_conv2d(xs[0], xs[1], n.attrs.get("strides", (1, 1)),
                               n.attrs.get("padding", "VALID"), bias)
    elif n.op is OpKind.MatMul:
        out = matmul(xs[0], xs[1], bias)
    elif n.op is OpKind.AddV2:
        out = xs[0] + _trailing(xs[1], xs[0], n)
    elif n.op is OpKind.Mul:
        out = xs[0] * _trailing(xs[1], xs[0], n)
    elif n.op is OpKind.Relu6:
        out = relu6(xs[0])
    elif n.op is OpKind.Mean:
        out = mean_over(xs[0], n.attrs["axes"], n.attrs.get("keep_dims", False))
    elif n.op is OpKind.Pad:
        out = zero_pad(xs[0], n.attrs["paddings"])
    elif n.op is OpKind.Identity:
        out = xs[0]
    else:  # pragma: no cover
        raise GraphError(f"unhandled op {n.op}")
    out = np.asarray(out, dtype=np.float32)
    if out_dtype is DType.FP16:
        return Tensor.from_array(round_to_fp16(out), DType.FP16)
    return Tensor.from_array(out, DType.FP32)


def _trailing(b: np.ndarray, a: np.ndarray, n: Node) -> np.ndarray:
    """Validates the trailing-axis broadcast rule before handing to numpy."""
    if b.shape == a.shape or b.shape in ((), (1,)):
        return b
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return b
    # allow the symmetric case (vector op tensor)
    if a.shape in ((), (1,)) or (a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]):
        return b
    raise ShapeMismatchError(f"node {n.id!r}: cannot broadcast {b.shape} with {a.shape}")


def _bias_array(g: Graph, n: Node):
    ref = n.attrs.get("bias_ref")
    if ref is None:
        return None
    entry = g.weights[ref]
    if entry.dtype == "int32":
        return entry.array
    return entry.array.astype(np.float32)


def _eval_int8(g: Graph, n: Node, ins: list[Tensor]) -> Tensor:
    out_scale = float(n.attrs["out_scale"])
    qp = QuantParams(scale=out_scale)
    if n.op in (OpKind.Conv2D, OpKind.DepthwiseConv2D, OpKind.MatMul):
        x, w = ins
        if x.dtype is not DType.INT8 or w.dtype is not DType.INT8:
            raise DTypeMismatchError(
                f"node {n.id!r}: INT8 kernel needs INT8 operands, got "
                f"{x.dtype.value}/{w.dtype.value}"
            )
        w_scales = w.quant.scales if w.quant.axis is not None else (w.quant.scale,) * _out_channels(n, w)
        bias = _bias_array(g, n)
        if n.op is OpKind.MatMul:
            out = matmul_int8(x.data, w.data, x.quant.scale, w_scales, out_scale, bias)
        else:
            out = conv2d_int8(
                x.data, w.data, x.quant.scale, w_scales, out_scale,
                n.attrs.get("strides", (1, 1)), n.attrs.get("padding", "VALID"),
                bias_q=bias, depthwise=n.op is OpKind.DepthwiseConv2D,
            )
        return Tensor.from_array(out, DType.INT8, qp)

    if n.op in (OpKind.AddV2, OpKind.Mul):
        a, b = ins
        ra = a.data.astype(np.float64) * a.quant.scale_vector(a.shape)
        rb = b.data.astype(np.float64) * b.quant.scale_vector(b.shape)
        real = ra + rb if n.op is OpKind.AddV2 else ra * rb
        return Tensor.from_array(_requant_real(real, out_scale), DType.INT8, qp)

    x = ins[0]
    s_in = x.quant.scale
    if n.op is OpKind.Relu6:
        real = np.clip(x.data.astype(np.float64) * s_in, 0.0, 6.0)
        out = _requant_real(real, out_scale)
    elif n.op is OpKind.Mean:
        real = np.mean(x.data.astype(np.float64) * s_in,
                       axis=tuple(n.attrs["axes"]),
                       keepdims=n.attrs.get("keep_dims", False))
        out = _requant_real(real, out_scale)
    elif n.op is OpKind.Pad:
        padded = zero_pad(x.data, n.attrs["paddings"])  # zero_point 0: zeros are exact
        out = padded if out_scale == s_in else _requant_real(
            padded.astype(np.float64) * s_in, out_scale)
    elif n.op is OpKind.Identity:
        out = x.data if out_scale == s_in else _requant_real(
            x.data.astype(np.float64) * s_in, out_scale)
    else:  # pragma: no cover
        raise GraphError(f"unhandled int8 op {n.op}")
    return Tensor.from_array(out, DType.INT8, qp)


def _out_channels(n: Node, w: Tensor) -> int:
    if n.op is OpKind.MatMul:
        return w.shape[1]
    if n.op is OpKind.DepthwiseConv2D:
        return w.shape[2]  # per-channel scales are shared across the multiplier
    return w.shape[3]


# ---------------------------------------------------------------------------
# preprocessing and prediction

def preprocess(image_bytes: bytes, spec: PreprocessSpec) -> Tensor:
    """Decode PNG/JPEG bytes to an FP32 (1, H, W, 3) tensor in spec range."""
    try:
        img = Image.open(io.BytesIO(image_bytes))
        fmt = img.format
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image: {exc}")
    if fmt not in ("PNG", "JPEG"):
        raise ImageDecodeError(f"unsupported image format {fmt!r}", code="unsupported-format")
    img = img.convert("RGB")
    if img.size != (spec.target_width, spec.target_height):
        img = img.resize((spec.target_width, spec.target_height), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    if spec.value_range == "minus-one-one":
        arr = arr / np.float32(127.5) - np.float32(1.0)
    else:
        arr = arr / np.float32(255.0)
    return Tensor.from_array(arr[None, ...], DType.FP32)


@dataclass
class Prediction:
    label: str
    confidence: float
    scores: np.ndarray  # raw output vector (logit or probabilities)
    latency_ms: float

    def class_probabilities(self, classes: list[str]) -> dict[str, float]:
        vec = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if vec.size == 1:
            p = float(sigmoid(vec[0]))
            return {classes[0]: 1.0 - p, classes[1]: p}
        probs = softmax(vec)
        return {c: float(p) for c, p in zip(classes, probs)}


def sigmoid(x):
    z = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(z))  # bounded by 1, no overflow either side
    return np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax(x):
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def classify_output(raw: np.ndarray, classes: list[str]) -> tuple[str, float, np.ndarray]:
    """Maps the head output to (label, confidence, scores).

    Single-logit heads are sigmoid-binary where index 1 is the positive
    class; a 0.5 tie resolves to the positive class (safer to over-flag).
    Wider heads are softmax-multiclass.
    """
    vec = np.asarray(raw, dtype=np.float64).reshape(-1)
    if vec.size == 1:
        p_pos = float(sigmoid(vec[0]))
        if p_pos >= 0.5:
            return classes[1], p_pos, vec
        return classes[0], 1.0 - p_pos, vec
    probs = softmax(vec)
    idx = int(np.argmax(probs))
    return classes[idx], float(probs[idx]), probs


def predict(b: ModelBundle, image_bytes: bytes) -> Prediction:
    """Preprocess, forward, and postprocess; latency covers forward only."""
    inp = preprocess(image_bytes, b.preprocess)
    t0 = time.perf_counter()
    values = run_forward(b, inp)
    latency_ms = (time.perf_counter() - t0) * 1000.0
    out = values[b.graph.outputs[0]]
    label, confidence, scores = classify_output(out.to_float32(), b.classes)
    return Prediction(label=label, confidence=confidence, scores=scores,
                      latency_ms=latency_ms)
