"""Seeded builder for the small bundled CNN used by tests and the desk
pipeline: a 32x32x3 MobileNet-flavoured backbone (stride-2 stem, three
inverted-residual style blocks, global average pool) of roughly 31k
parameters.

Census of the backbone graph: Conv2D 5, DepthwiseConv2D 3, Relu6 5, Mul 1,
Pad 1, AddV2 9 (8 biases + 1 skip), Mean 1, Identity 1.
"""

from __future__ import annotations

import numpy as np

from .bundle import ModelBundle, PreprocessSpec
from .graph import Graph, InputSpec, Node, OpKind, WeightEntry, validate
from .tensor import DType


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.weights: list[WeightEntry] = []

    def const(self, name: str, array: np.ndarray) -> str:
        self.weights.append(WeightEntry(array.astype(np.float32), "fp32"))
        self.nodes.append(Node(id=name, op=OpKind.Const, inputs=[],
                               weight_ref=len(self.weights) - 1))
        return name

    def he_kernel(self, name: str, shape: tuple, fan_in: int) -> str:
        std = np.sqrt(2.0 / fan_in)
        return self.const(name, self.rng.normal(0.0, std, size=shape))

    def bias(self, scope: str, src: str, channels: int) -> str:
        b = self.const(f"{scope}/bias", self.rng.uniform(-0.05, 0.05, size=(channels,)))
        self.nodes.append(Node(id=f"{scope}/add_bias", op=OpKind.AddV2, inputs=[src, b]))
        return f"{scope}/add_bias"

    def conv(self, scope: str, src: str, in_c: int, out_c: int, k: int = 1,
             stride: int = 1, padding: str = "SAME") -> str:
        w = self.he_kernel(f"{scope}/weights", (k, k, in_c, out_c), k * k * in_c)
        self.nodes.append(Node(id=f"{scope}/conv", op=OpKind.Conv2D, inputs=[src, w],
                               attrs={"strides": (stride, stride), "padding": padding}))
        return self.bias(scope, f"{scope}/conv", out_c)

    def dwconv(self, scope: str, src: str, channels: int, stride: int = 1,
               padding: str = "SAME") -> str:
        w = self.he_kernel(f"{scope}/weights", (3, 3, channels, 1), 9)
        self.nodes.append(Node(id=f"{scope}/conv", op=OpKind.DepthwiseConv2D,
                               inputs=[src, w],
                               attrs={"strides": (stride, stride), "padding": padding}))
        return self.bias(scope, f"{scope}/conv", channels)

    def relu6(self, scope: str, src: str) -> str:
        self.nodes.append(Node(id=f"{scope}/relu6", op=OpKind.Relu6, inputs=[src]))
        return f"{scope}/relu6"


def build_micro_backbone(seed: int = 0, name: str = "micro-mobilenet") -> ModelBundle:
    """Feature-extractor bundle: input (1,32,32,3) FP32, output (1,56) FP32
    global-average-pooled features behind an Identity alias node."""
    b = _Builder(seed)

    b.nodes.append(Node(id="input", op=OpKind.Input, inputs=[]))
    x = b.relu6("stem", b.conv("stem", "input", 3, 24, k=3, stride=2))

    # block 1: depthwise + linear projection, 24 -> 40
    x = b.relu6("block1/dw", b.dwconv("block1/dw", x, 24))
    x = b.conv("block1/project", x, 24, 40)
    # folded-norm remnant: per-channel scale on the projection
    scale = b.const("block1/scale", b.rng.uniform(0.8, 1.2, size=(40,)))
    b.nodes.append(Node(id="block1/mul_scale", op=OpKind.Mul, inputs=[x, scale]))
    x = "block1/mul_scale"

    # block 2: expand x6, explicit pad + stride-2 depthwise, project to 56
    x = b.relu6("block2/expand", b.conv("block2/expand", x, 40, 240))
    pads = ((0, 0), (0, 1), (0, 1), (0, 0))  # SAME-equivalent for 16->8, k=3 s=2
    b.nodes.append(Node(id="block2/pad", op=OpKind.Pad, inputs=[x],
                        attrs={"paddings": pads}))
    x = b.relu6("block2/dw", b.dwconv("block2/dw", "block2/pad", 240, stride=2,
                                      padding="VALID"))
    x = b.conv("block2/project", x, 240, 56)

    # block 3: depthwise + projection with residual skip, 56 -> 56
    skip_src = x
    y = b.relu6("block3/dw", b.dwconv("block3/dw", x, 56))
    y = b.conv("block3/project", y, 56, 56)
    b.nodes.append(Node(id="block3/add_skip", op=OpKind.AddV2, inputs=[y, skip_src]))

    b.nodes.append(Node(id="pool", op=OpKind.Mean, inputs=["block3/add_skip"],
                        attrs={"axes": (1, 2), "keep_dims": False}))
    b.nodes.append(Node(id="features", op=OpKind.Identity, inputs=["pool"]))

    g = Graph(nodes=b.nodes, outputs=["features"],
              input_specs={"input": InputSpec(shape=(1, 32, 32, 3), dtype=DType.FP32)},
              output_dtype=DType.FP32, weights=b.weights)
    validate(g)
    return ModelBundle(
        graph=g, name=name, variant="fp32", classes=[],
        preprocess=PreprocessSpec(target_height=32, target_width=32,
                                  value_range="minus-one-one"),
    )


def parameter_count(bundle: ModelBundle) -> int:
    return int(sum(e.array.size for e in bundle.graph.weights))
