"""Dataflow graph over the twelve-op vocabulary.

Graphs are lists of nodes in topological order plus a weight table holding
constant payloads.  Layouts follow the source-framework conventions the op
names come from: activations NHWC, conv kernels (kh, kw, in_c, out_c),
depthwise kernels (kh, kw, channels, multiplier).

Conv2D / DepthwiseConv2D / MatMul nodes may carry a ``bias_ref`` attribute
pointing at a weight-table entry; the optimizer introduces it when folding a
constant AddV2 into the producing op, so arity stays fixed at two inputs.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import GraphError, ShapeMismatchError
from .tensor import DType, QuantParams


class OpKind(enum.Enum):
    Input = "Input"
    Const = "Const"
    Conv2D = "Conv2D"
    DepthwiseConv2D = "DepthwiseConv2D"
    MatMul = "MatMul"
    AddV2 = "AddV2"
    Mul = "Mul"
    Relu6 = "Relu6"
    Mean = "Mean"
    Pad = "Pad"
    Cast = "Cast"
    Identity = "Identity"


# Foreign graph spellings accepted at import time.  NoOp is dropped by the
# loader, so it has no entry here.
OP_ALIASES = {
    "Placeholder": OpKind.Input,
    "DepthwiseConv2dNative": OpKind.DepthwiseConv2D,
}

ARITY = {
    OpKind.Input: 0,
    OpKind.Const: 0,
    OpKind.Conv2D: 2,
    OpKind.DepthwiseConv2D: 2,
    OpKind.MatMul: 2,
    OpKind.AddV2: 2,
    OpKind.Mul: 2,
    OpKind.Relu6: 1,
    OpKind.Mean: 1,
    OpKind.Pad: 1,
    OpKind.Cast: 1,
    OpKind.Identity: 1,
}

# Weight-table storage dtypes.  int32 exists only for biases quantized at
# in_scale * w_scale; it never appears as a Tensor dtype.
STORAGE_DTYPES = {
    "fp32": np.float32,
    "fp16": np.float16,
    "int8": np.int8,
    "int32": np.int32,
}


@dataclass
class WeightEntry:
    array: np.ndarray
    dtype: str  # key into STORAGE_DTYPES
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        if self.dtype not in STORAGE_DTYPES:
            raise GraphError(f"unknown weight storage dtype {self.dtype!r}")
        self.array = np.ascontiguousarray(self.array, dtype=STORAGE_DTYPES[self.dtype])
        if self.dtype in ("int8", "int32") and self.quant is None:
            raise GraphError("integer weight entries require quant params")

    @property
    def nbytes(self) -> int:
        return self.array.nbytes


@dataclass
class Node:
    id: str
    op: OpKind
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    weight_ref: Optional[int] = None


@dataclass
class InputSpec:
    shape: tuple[int, ...]
    dtype: DType = DType.FP32


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    input_specs: dict[str, InputSpec] = field(default_factory=dict)
    output_dtype: DType = DType.FP32
    weights: list[WeightEntry] = field(default_factory=list)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError(f"dangling reference to node {node_id!r}", code="dangling-reference")

    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i in out:
                    out[i].append(n)
        return out

    def copy(self) -> "Graph":
        return Graph(
            nodes=[replace(n, inputs=list(n.inputs), attrs=dict(n.attrs)) for n in self.nodes],
            outputs=list(self.outputs),
            input_specs={k: replace(v) for k, v in self.input_specs.items()},
            output_dtype=self.output_dtype,
            weights=[WeightEntry(e.array.copy(), e.dtype, e.quant) for e in self.weights],
        )


def validate(g: Graph) -> None:
    """Checks ids, arity, topological order, and weight references.

    Reachability from the outputs is enforced only when outputs are declared;
    builders may census partial graphs before wiring outputs.
    """
    seen: set[str] = set()
    for n in g.nodes:
        if n.id in seen:
            raise GraphError(f"duplicate node id {n.id!r}")
        if not isinstance(n.op, OpKind):
            raise GraphError(f"unknown op on node {n.id!r}", code="unknown-op")
        if len(n.inputs) != ARITY[n.op]:
            raise GraphError(
                f"node {n.id!r}: {n.op.value} expects {ARITY[n.op]} inputs, "
                f"got {len(n.inputs)}",
                code="arity-violation",
            )
        for ref in n.inputs:
            if ref not in seen:
                raise GraphError(
                    f"node {n.id!r} references {ref!r} which is missing or "
                    f"out of topological order",
                    code="dangling-reference",
                )
        if n.op is OpKind.Const:
            if n.weight_ref is None or not (0 <= n.weight_ref < len(g.weights)):
                raise GraphError(
                    f"Const node {n.id!r} has invalid weight_ref {n.weight_ref}",
                    code="dangling-reference",
                )
        elif n.weight_ref is not None:
            raise GraphError(f"non-Const node {n.id!r} carries weight_ref")
        bias_ref = n.attrs.get("bias_ref")
        if bias_ref is not None and not (0 <= bias_ref < len(g.weights)):
            raise GraphError(
                f"node {n.id!r} has invalid bias_ref {bias_ref}",
                code="dangling-reference",
            )
        if n.op is OpKind.Input and n.id not in g.input_specs:
            raise GraphError(f"Input node {n.id!r} has no input spec")
        seen.add(n.id)
    for out in g.outputs:
        if out not in seen:
            raise GraphError(f"output {out!r} is not a node", code="dangling-reference")
    if g.outputs:
        reachable = reachable_ids(g)
        unreachable = [n.id for n in g.nodes if n.id not in reachable]
        if unreachable:
            raise GraphError(
                f"nodes unreachable from outputs: {unreachable}", code="unreachable-node"
            )


def reachable_ids(g: Graph) -> set[str]:
    nodes = g.node_map()
    stack = list(g.outputs)
    seen: set[str] = set()
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        node = nodes.get(nid)
        if node is None:
            raise GraphError(f"dangling reference to node {nid!r}", code="dangling-reference")
        stack.extend(node.inputs)
        bias_ref = node.attrs.get("bias_ref")
        _ = bias_ref  # bias lives in the weight table, not as a node
    return seen


def op_census(g: Graph) -> Counter:
    """Per-op node counts keyed by op name; values sum to the node count."""
    return Counter(n.op.value for n in g.nodes)


def same_padding(in_size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """TF-style SAME: out = ceil(in/stride), extra padding goes at the end."""
    out = math.ceil(in_size / stride)
    total = max((out - 1) * stride + kernel - in_size, 0)
    before = total // 2
    return out, before, total - before


def valid_out(in_size: int, kernel: int, stride: int) -> int:
    if in_size < kernel:
        raise ShapeMismatchError(f"kernel {kernel} larger than input {in_size} under VALID")
    return (in_size - kernel) // stride + 1


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], node_id: str) -> tuple[int, ...]:
    """Trailing-axis broadcast: equal shapes, scalar, or rank-1 on last axis."""
    if a == b:
        return a
    for big, small in ((a, b), (b, a)):
        if small in ((), (1,)):
            return big
        if len(small) == 1 and big and small[0] == big[-1]:
            return big
    raise ShapeMismatchError(f"node {node_id!r}: cannot broadcast {a} with {b}")


def infer_shapes(g: Graph) -> dict[str, tuple[int, ...]]:
    """Concrete output shape per node id."""
    shapes: dict[str, tuple[int, ...]] = {}
    for n in g.nodes:
        if n.op is OpKind.Input:
            shapes[n.id] = tuple(g.input_specs[n.id].shape)
        elif n.op is OpKind.Const:
            shapes[n.id] = tuple(g.weights[n.weight_ref].array.shape)
        elif n.op in (OpKind.Conv2D, OpKind.DepthwiseConv2D):
            shapes[n.id] = _conv_shape(n, shapes[n.inputs[0]], shapes[n.inputs[1]])
        elif n.op is OpKind.MatMul:
            x, w = shapes[n.inputs[0]], shapes[n.inputs[1]]
            if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
                raise ShapeMismatchError(f"node {n.id!r}: MatMul of {x} and {w}")
            shapes[n.id] = (x[0], w[1])
        elif n.op in (OpKind.AddV2, OpKind.Mul):
            shapes[n.id] = broadcast_shape(shapes[n.inputs[0]], shapes[n.inputs[1]], n.id)
        elif n.op in (OpKind.Relu6, OpKind.Cast, OpKind.Identity):
            shapes[n.id] = shapes[n.inputs[0]]
        elif n.op is OpKind.Mean:
            shapes[n.id] = _mean_shape(n, shapes[n.inputs[0]])
        elif n.op is OpKind.Pad:
            pads = n.attrs["paddings"]
            src = shapes[n.inputs[0]]
            if len(pads) != len(src):
                raise ShapeMismatchError(
                    f"node {n.id!r}: {len(pads)} pad pairs for rank {len(src)}"
                )
            shapes[n.id] = tuple(s + b + a for s, (b, a) in zip(src, pads))
        else:  # pragma: no cover
            raise GraphError(f"unhandled op {n.op}")
    return shapes


def _conv_shape(n: Node, x: tuple[int, ...], k: tuple[int, ...]) -> tuple[int, ...]:
    if len(x) != 4 or len(k) != 4:
        raise ShapeMismatchError(f"node {n.id!r}: conv needs rank-4 data {x} and kernel {k}")
    sh, sw = n.attrs.get("strides", (1, 1))
    padding = n.attrs.get("padding", "VALID")
    kh, kw = k[0], k[1]
    if n.op is OpKind.Conv2D:
        if k[2] != x[3]:
            raise ShapeMismatchError(
                f"node {n.id!r}: kernel in-channels {k[2]} vs data channels {x[3]}"
            )
        out_c = k[3]
    else:
        if k[2] != x[3]:
            raise ShapeMismatchError(
                f"node {n.id!r}: depthwise kernel channels {k[2]} vs data channels {x[3]}"
            )
        out_c = k[2] * k[3]
    if padding == "SAME":
        oh = same_padding(x[1], kh, sh)[0]
        ow = same_padding(x[2], kw, sw)[0]
    elif padding == "VALID":
        oh = valid_out(x[1], kh, sh)
        ow = valid_out(x[2], kw, sw)
    else:
        raise GraphError(f"node {n.id!r}: unknown padding {padding!r}")
    return (x[0], oh, ow, out_c)


def _mean_shape(n: Node, x: tuple[int, ...]) -> tuple[int, ...]:
    axes = sorted(n.attrs["axes"])
    if any(a < 0 or a >= len(x) for a in axes):
        raise ShapeMismatchError(f"node {n.id!r}: mean axes {axes} out of rank {len(x)}")
    if n.attrs.get("keep_dims", False):
        return tuple(1 if i in axes else d for i, d in enumerate(x))
    return tuple(d for i, d in enumerate(x) if i not in axes)


def infer_dtypes(g: Graph) -> dict[str, DType]:
    """Element dtype per node id, checking mixed-precision boundaries."""
    dts: dict[str, DType] = {}
    for n in g.nodes:
        if n.op is OpKind.Input:
            dts[n.id] = g.input_specs[n.id].dtype
        elif n.op is OpKind.Const:
            entry = g.weights[n.weight_ref]
            if entry.dtype == "int32":
                raise GraphError(f"Const node {n.id!r} may not expose int32 storage")
            dts[n.id] = DType(entry.dtype)
        elif n.op is OpKind.Cast:
            dts[n.id] = DType(n.attrs["to"])
        elif n.op in (OpKind.Conv2D, OpKind.DepthwiseConv2D, OpKind.MatMul,
                      OpKind.AddV2, OpKind.Mul):
            a, b = dts[n.inputs[0]], dts[n.inputs[1]]
            if a is not b:
                raise GraphError(
                    f"node {n.id!r}: mixed operand dtypes {a.value}/{b.value} "
                    f"without a Cast boundary",
                    code="dtype-mismatch",
                )
            dts[n.id] = a
        else:
            dts[n.id] = dts[n.inputs[0]]
    return dts
