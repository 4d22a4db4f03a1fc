import numpy as np
import pytest

from edgeinfer.bundle import save_bundle
from edgeinfer.graph import Graph, InputSpec, Node, OpKind, WeightEntry
from edgeinfer.micronet import build_micro_backbone
from edgeinfer.synth import generate_synthetic
from edgeinfer.tensor import DType


def tiny_conv_graph(weights=None, bias=None, scale=None):
    """input (1,3,3,1) -> Conv2D 2x2 VALID -> optional AddV2/Mul consts."""
    w = np.ones((2, 2, 1, 1), dtype=np.float32) if weights is None else weights
    nodes = [
        Node(id="x", op=OpKind.Input),
        Node(id="w", op=OpKind.Const, weight_ref=0),
        Node(id="conv", op=OpKind.Conv2D, inputs=["x", "w"],
             attrs={"strides": (1, 1), "padding": "VALID"}),
    ]
    entries = [WeightEntry(w, "fp32")]
    tail = "conv"
    if bias is not None:
        entries.append(WeightEntry(np.asarray(bias, dtype=np.float32), "fp32"))
        nodes.append(Node(id="b", op=OpKind.Const, weight_ref=len(entries) - 1))
        nodes.append(Node(id="addb", op=OpKind.AddV2, inputs=[tail, "b"]))
        tail = "addb"
    if scale is not None:
        entries.append(WeightEntry(np.asarray(scale, dtype=np.float32), "fp32"))
        nodes.append(Node(id="s", op=OpKind.Const, weight_ref=len(entries) - 1))
        nodes.append(Node(id="muls", op=OpKind.Mul, inputs=[tail, "s"]))
        tail = "muls"
    return Graph(nodes=nodes, outputs=[tail],
                 input_specs={"x": InputSpec(shape=(1, 3, 3, 1), dtype=DType.FP32)},
                 output_dtype=DType.FP32, weights=entries)


@pytest.fixture(scope="session")
def backbone():
    return build_micro_backbone(seed=0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    generate_synthetic(root, per_class=25, seed=3)
    return root


@pytest.fixture(scope="session")
def backbone_dir(tmp_path_factory, backbone):
    d = tmp_path_factory.mktemp("bundles") / "backbone"
    save_bundle(backbone, d)
    return d
