"""On-disk model container: a directory holding a textual manifest and a
little-endian binary weight blob.

Layout (format version 1.x, documented field-by-field in docs/bundle_format.md):

    <bundle-dir>/
      manifest.json   UTF-8 JSON: graph, metadata, weight table, blob digest
      weights.bin     raw little-endian tensor payloads, back to back

The weight table in the manifest gives (offset, length, dtype, shape, quant)
per tensor.  The manifest stores the SHA-256 digest (32 bytes, hex) of
weights.bin; the loader recomputes and rejects mismatches.  Unknown major
format versions are rejected.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BundleError
from .graph import (
    OP_ALIASES,
    Graph,
    InputSpec,
    Node,
    OpKind,
    WeightEntry,
    validate,
)
from .tensor import DType, QuantParams

FORMAT_VERSION = "1.0"

# numpy dtype strings with explicit little-endian byte order
_WIRE_DTYPES = {"fp32": "<f4", "fp16": "<f2", "int8": "<i1", "int32": "<i4"}


@dataclass
class PreprocessSpec:
    """Image-to-tensor recipe stored in the manifest so serving and
    evaluation preprocess identically."""

    target_height: int = 32
    target_width: int = 32
    value_range: str = "minus-one-one"  # or "zero-one"
    resize: str = "bilinear"

    def to_json(self) -> dict:
        return {
            "target_height": self.target_height,
            "target_width": self.target_width,
            "value_range": self.value_range,
            "resize": self.resize,
        }

    @staticmethod
    def from_json(doc: dict) -> "PreprocessSpec":
        spec = PreprocessSpec(
            target_height=int(doc["target_height"]),
            target_width=int(doc["target_width"]),
            value_range=doc["value_range"],
            resize=doc.get("resize", "bilinear"),
        )
        if spec.value_range not in ("zero-one", "minus-one-one"):
            raise BundleError(f"unknown value_range {spec.value_range!r}")
        return spec


@dataclass
class ModelBundle:
    graph: Graph
    name: str = "model"
    variant: str = "original"
    classes: list[str] = field(default_factory=list)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    created: str = ""
    path: Optional[Path] = None

    def __post_init__(self):
        if not self.created:
            # honor SOURCE_DATE_EPOCH so seeded builds are byte-identical
            epoch = os.environ.get("SOURCE_DATE_EPOCH")
            when = (datetime.fromtimestamp(int(epoch), timezone.utc)
                    if epoch else datetime.now(timezone.utc))
            self.created = when.isoformat(timespec="seconds")

    def checksum(self) -> str:
        return hashlib.sha256(weight_blob(self.graph)).hexdigest()

    def with_graph(self, g: Graph, variant: str) -> "ModelBundle":
        return ModelBundle(
            graph=g,
            name=self.name,
            variant=variant,
            classes=list(self.classes),
            preprocess=PreprocessSpec(**self.preprocess.to_json()),
            created=self.created,
        )


def weight_blob(g: Graph) -> bytes:
    parts = []
    for entry in g.weights:
        parts.append(np.ascontiguousarray(entry.array).astype(_WIRE_DTYPES[entry.dtype]).tobytes())
    return b"".join(parts)


def _quant_to_json(q: Optional[QuantParams]) -> Optional[dict]:
    if q is None:
        return None
    if q.axis is None:
        return {"scale": q.scale}
    return {"axis": q.axis, "scales": list(q.scales)}


def _quant_from_json(doc: Optional[dict]) -> Optional[QuantParams]:
    if doc is None:
        return None
    if "axis" in doc:
        return QuantParams(axis=int(doc["axis"]), scales=tuple(float(s) for s in doc["scales"]))
    return QuantParams(scale=float(doc["scale"]))


def manifest_document(b: ModelBundle) -> dict:
    blob = weight_blob(b.graph)
    table = []
    offset = 0
    for entry in b.graph.weights:
        length = entry.nbytes
        table.append({
            "offset": offset,
            "length": length,
            "dtype": entry.dtype,
            "shape": list(entry.array.shape),
            "quant": _quant_to_json(entry.quant),
        })
        offset += length
    return {
        "format_version": FORMAT_VERSION,
        "kind": "edgeinfer-bundle",
        "name": b.name,
        "variant": b.variant,
        "classes": list(b.classes),
        "preprocess": b.preprocess.to_json(),
        "created": b.created,
        "inputs": [
            {"id": nid, "shape": list(spec.shape), "dtype": spec.dtype.value}
            for nid, spec in b.graph.input_specs.items()
        ],
        "outputs": list(b.graph.outputs),
        "output_dtype": b.graph.output_dtype.value,
        "nodes": [
            {
                "id": n.id,
                "op": n.op.value,
                "inputs": list(n.inputs),
                "attrs": n.attrs,
                "weight_ref": n.weight_ref,
            }
            for n in b.graph.nodes
        ],
        "weights": table,
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }


def save_bundle(b: ModelBundle, path) -> str:
    """Writes the container directory; returns the blob digest."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        doc = manifest_document(b)
        blob = weight_blob(b.graph)
        (out / "weights.bin").write_bytes(blob)
        (out / "manifest.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise BundleError(f"cannot write bundle at {out}: {exc}", code="unwritable-path")
    return doc["weights_sha256"]


def load_bundle(path) -> ModelBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BundleError(f"no manifest.json under {root}", code="missing-manifest")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleError(f"unreadable manifest: {exc}", code="bad-manifest")

    version = str(doc.get("format_version", ""))
    major = version.split(".", 1)[0]
    if major != FORMAT_VERSION.split(".", 1)[0]:
        raise BundleError(
            f"unsupported bundle format version {version!r}", code="version-mismatch"
        )

    blob = (root / "weights.bin").read_bytes() if (root / "weights.bin").exists() else b""
    digest = hashlib.sha256(blob).hexdigest()
    if digest != doc.get("weights_sha256"):
        raise BundleError(
            f"weight blob digest {digest[:12]}... does not match manifest",
            code="checksum-mismatch",
        )

    weights = []
    for i, w in enumerate(doc.get("weights", [])):
        off, length = int(w["offset"]), int(w["length"])
        if off + length > len(blob):
            raise BundleError(f"weight {i} extends past blob end", code="dangling-reference")
        arr = np.frombuffer(blob, dtype=_WIRE_DTYPES[w["dtype"]], count=length // np.dtype(_WIRE_DTYPES[w["dtype"]]).itemsize, offset=off)
        arr = arr.reshape([int(d) for d in w["shape"]]).copy()
        weights.append(WeightEntry(arr, w["dtype"], _quant_from_json(w.get("quant"))))

    nodes = []
    for nd in doc["nodes"]:
        op_name = nd["op"]
        if op_name == "NoOp":  # pass-through op from foreign graphs, dropped
            continue
        try:
            op = OP_ALIASES.get(op_name) or OpKind(op_name)
        except ValueError:
            raise BundleError(
                f"unknown op {op_name!r} on node {nd['id']!r}", code="unknown-op"
            )
        nodes.append(Node(
            id=nd["id"],
            op=op,
            inputs=list(nd.get("inputs", [])),
            attrs=_normalize_attrs(nd.get("attrs", {})),
            weight_ref=nd.get("weight_ref"),
        ))

    g = Graph(
        nodes=nodes,
        outputs=list(doc.get("outputs", [])),
        input_specs={
            i["id"]: InputSpec(tuple(int(d) for d in i["shape"]), DType(i["dtype"]))
            for i in doc.get("inputs", [])
        },
        output_dtype=DType(doc.get("output_dtype", "fp32")),
        weights=weights,
    )
    try:
        validate(g)
    except Exception as exc:
        raise BundleError(f"invalid graph in bundle {root}: {exc}",
                          code=getattr(exc, "code", "invalid-graph"))

    bundle = ModelBundle(
        graph=g,
        name=doc.get("name", root.name),
        variant=doc.get("variant", "original"),
        classes=list(doc.get("classes", [])),
        preprocess=PreprocessSpec.from_json(doc["preprocess"]) if "preprocess" in doc else PreprocessSpec(),
        created=doc.get("created", ""),
        path=root,
    )
    return bundle


def _normalize_attrs(attrs: dict) -> dict:
    out = dict(attrs)
    if "strides" in out:
        out["strides"] = tuple(int(s) for s in out["strides"])
    if "axes" in out:
        out["axes"] = [int(a) for a in out["axes"]]
    if "paddings" in out:
        out["paddings"] = [(int(b), int(a)) for b, a in out["paddings"]]
    return out


def size_of(b: ModelBundle) -> tuple[int, int]:
    """(container_bytes, weight_payload_bytes) for the serialized bundle."""
    doc = manifest_document(b)
    manifest_bytes = len((json.dumps(doc, indent=2) + "\n").encode("utf-8"))
    payload = sum(e.nbytes for e in b.graph.weights)
    return manifest_bytes + payload, payload
