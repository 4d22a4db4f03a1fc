"""Post-training optimization passes.

Three variants derive from an FP32 bundle:

* fp32opt - constant fusion only (Identity collapse, const Mul folded into
  conv weights, const AddV2 folded into a conv bias entry).
* fp16    - fusion, weights stored binary16, Cast nodes at the FP32
  boundaries (after inputs, before outputs, around excluded nodes).
* int8    - fusion, per-output-channel symmetric weights, per-tensor
  symmetric activations from a min-max calibration profile, quantize /
  dequantize boundaries expressed as Cast nodes.

Graph inputs and outputs stay FP32 in every variant.  Biases are quantized
to 32-bit integers at in_scale * w_scale and added to the accumulator before
the single boundary requantization, never to 8 bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import engine
from .bundle import ModelBundle, PreprocessSpec, load_bundle, size_of  # noqa: F401 (size_of re-exported)
from .errors import BundleError, CalibrationError, DataError
from .graph import Graph, Node, OpKind, WeightEntry, validate
from .tensor import DType, QuantParams, Tensor, round_to_fp16

SCALE_FLOOR = 1e-8  # numerator floor: scale = max(range, 1e-8) / 127
_KERNEL_AXIS = {OpKind.Conv2D: 3, OpKind.DepthwiseConv2D: 2, OpKind.MatMul: 1}
_CONV_LIKE = (OpKind.Conv2D, OpKind.DepthwiseConv2D, OpKind.MatMul)


# ---------------------------------------------------------------------------
# constant fusion

def fuse_constants(g: Graph) -> Graph:
    """Collapses Identity nodes and folds constant Mul/AddV2 chains after
    Conv2D/DepthwiseConv2D/MatMul into the op's weights and bias entry.
    Node count never increases; outputs are numerically preserved."""
    return fuse_constants_with_alias(g)[0]


def fuse_constants_with_alias(g: Graph) -> tuple[Graph, dict[str, str]]:
    """Like fuse_constants, but also returns, per surviving node id, the id
    of the node in the source graph whose value it now produces (calibration
    profiles are keyed by source ids)."""
    g = g.copy()
    alias = {n.id: n.id for n in g.nodes}
    while _fuse_one(g, alias):
        pass
    _prune(g, alias)
    return g, alias


def _fuse_one(g: Graph, alias: dict[str, str]) -> bool:
    nodes = g.node_map()
    consumers = g.consumers()

    for n in g.nodes:
        if n.op is OpKind.Identity:
            src = n.inputs[0]
            for c in consumers[n.id]:
                c.inputs = [src if i == n.id else i for i in c.inputs]
            g.outputs = [src if o == n.id else o for o in g.outputs]
            g.nodes.remove(n)
            alias.pop(n.id, None)
            return True

    for n in g.nodes:
        if n.op not in _CONV_LIKE or n.id in g.outputs:
            continue
        cons = consumers[n.id]
        if len(cons) != 1:
            continue
        c = cons[0]
        if c.op not in (OpKind.Mul, OpKind.AddV2):
            continue
        const_id = c.inputs[1] if c.inputs[0] == n.id else c.inputs[0]
        const = nodes.get(const_id)
        if const is None or const.op is not OpKind.Const:
            continue
        if len(consumers[const_id]) != 1:
            continue
        kernel = nodes[n.inputs[1]]
        if kernel.op is not OpKind.Const or len(consumers[kernel.id]) != 1:
            continue
        if g.weights[kernel.weight_ref].dtype != "fp32":
            continue
        factor = g.weights[const.weight_ref].array.astype(np.float64).reshape(-1)
        out_c = _fold_out_channels(g, n, kernel)
        if factor.size not in (1, out_c):
            continue
        if g.weights[const.weight_ref].dtype != "fp32":
            continue
        if c.op is OpKind.Mul:
            _scale_kernel(g, n, kernel, factor, out_c)
            if "bias_ref" in n.attrs:
                b = g.weights[n.attrs["bias_ref"]].array.astype(np.float64)
                g.weights[n.attrs["bias_ref"]] = WeightEntry(
                    (b * factor).astype(np.float32), "fp32")
        else:
            addend = np.broadcast_to(factor, (out_c,)).astype(np.float64)
            if "bias_ref" in n.attrs:
                b = g.weights[n.attrs["bias_ref"]].array.astype(np.float64)
                g.weights[n.attrs["bias_ref"]] = WeightEntry(
                    (b + addend).astype(np.float32), "fp32")
            else:
                g.weights.append(WeightEntry(addend.astype(np.float32), "fp32"))
                n.attrs["bias_ref"] = len(g.weights) - 1
        for cc in consumers[c.id]:
            cc.inputs = [n.id if i == c.id else i for i in cc.inputs]
        g.outputs = [n.id if o == c.id else o for o in g.outputs]
        g.nodes.remove(c)
        alias[n.id] = alias.pop(c.id)
        return True
    return False


def _fold_out_channels(g: Graph, n: Node, kernel: Node) -> int:
    shape = g.weights[kernel.weight_ref].array.shape
    if n.op is OpKind.Conv2D:
        return shape[3]
    if n.op is OpKind.DepthwiseConv2D:
        return shape[2] * shape[3]
    return shape[1]


def _scale_kernel(g: Graph, n: Node, kernel: Node, factor: np.ndarray, out_c: int):
    w = g.weights[kernel.weight_ref].array.astype(np.float64)
    vec = np.broadcast_to(factor, (out_c,))
    if n.op is OpKind.DepthwiseConv2D:
        kh, kw, c, m = w.shape
        w = w * vec.reshape(c, m)
    else:
        w = w * vec
    g.weights[kernel.weight_ref] = WeightEntry(w.astype(np.float32), "fp32")


def _prune(g: Graph, alias: dict[str, str]) -> None:
    if not g.outputs:
        return
    keep: set[str] = set()
    nodes = g.node_map()
    stack = list(g.outputs)
    while stack:
        nid = stack.pop()
        if nid in keep:
            continue
        keep.add(nid)
        stack.extend(nodes[nid].inputs)
    g.nodes = [n for n in g.nodes if n.id in keep]
    for nid in list(alias):
        if nid not in keep:
            del alias[nid]
    _compact_weights(g)


def _compact_weights(g: Graph) -> None:
    used: list[int] = []
    for n in g.nodes:
        if n.weight_ref is not None:
            used.append(n.weight_ref)
        if "bias_ref" in n.attrs:
            used.append(n.attrs["bias_ref"])
    remap = {old: new for new, old in enumerate(dict.fromkeys(used))}
    g.weights = [g.weights[old] for old in remap]
    for n in g.nodes:
        if n.weight_ref is not None:
            n.weight_ref = remap[n.weight_ref]
        if "bias_ref" in n.attrs:
            n.attrs["bias_ref"] = remap[n.attrs["bias_ref"]]


# ---------------------------------------------------------------------------
# calibration

@dataclass
class ActivationStats:
    lo: float = math.inf
    hi: float = -math.inf
    count: int = 0

    def update(self, values: np.ndarray) -> None:
        self.lo = min(self.lo, float(values.min()))
        self.hi = max(self.hi, float(values.max()))
        self.count += 1


@dataclass
class CalibrationProfile:
    """Running per-node min/max over calibration forwards, plus a bounded
    reservoir of absolute values for the optional percentile scale rule."""

    stats: dict[str, ActivationStats] = dc_field(default_factory=dict)
    samples: dict[str, np.ndarray] = dc_field(default_factory=dict)
    sample_cap: int = 4096

    def observe(self, node_id: str, values: np.ndarray, rng: np.random.Generator) -> None:
        st = self.stats.setdefault(node_id, ActivationStats())
        st.update(values)
        flat = np.abs(values.reshape(-1).astype(np.float32))
        if flat.size > self.sample_cap:
            flat = rng.choice(flat, size=self.sample_cap, replace=False)
        pool = self.samples.get(node_id)
        merged = flat if pool is None else np.concatenate([pool, flat])
        if merged.size > self.sample_cap:
            merged = rng.choice(merged, size=self.sample_cap, replace=False)
        self.samples[node_id] = merged

    def range_for(self, node_id: str, percentile: Optional[float] = None) -> float:
        if node_id not in self.stats:
            raise CalibrationError(f"no calibration record for node {node_id!r}")
        st = self.stats[node_id]
        if percentile is not None:
            return float(np.percentile(self.samples[node_id], percentile))
        return max(abs(st.lo), abs(st.hi))

    def scale_for(self, node_id: str, percentile: Optional[float] = None) -> float:
        return max(self.range_for(node_id, percentile), SCALE_FLOOR) / 127.0

    def save(self, path) -> None:
        lines = ["# edgeinfer calibration profile v1",
                 "# node_id\tmin\tmax\tsample_count"]
        for nid in sorted(self.stats):
            st = self.stats[nid]
            lines.append(f"{nid}\t{st.lo!r}\t{st.hi!r}\t{st.count}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "CalibrationProfile":
        prof = CalibrationProfile()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CalibrationError(f"profile line {lineno}: expected 4 fields")
            nid, lo, hi, count = parts
            prof.stats[nid] = ActivationStats(float(lo), float(hi), int(count))
            prof.samples[nid] = np.array([max(abs(float(lo)), abs(float(hi)))], dtype=np.float32)
        return prof


def calibrate(b: ModelBundle, images: Iterable, seed: int = 0) -> CalibrationProfile:
    """Runs every calibration image through the FP32 bundle, recording
    min/max per node.  ``images`` yields raw bytes, file paths, or
    already-preprocessed input tensors."""
    _require_fp32(b)
    profile = CalibrationProfile()
    rng = np.random.default_rng(seed)
    count = 0
    for item in images:
        tensor = _as_input_tensor(item, b.preprocess)
        values = engine.run_forward(b, tensor)
        for nid, t in values.items():
            profile.observe(nid, t.to_float32(), rng)
        count += 1
    if count == 0:
        raise DataError("calibration dataset is empty", code="empty-dataset")
    return profile


def _as_input_tensor(item, spec: PreprocessSpec) -> Tensor:
    if isinstance(item, Tensor):
        return item
    if isinstance(item, (str, Path)):
        return engine.preprocess(Path(item).read_bytes(), spec)
    if isinstance(item, (bytes, bytearray)):
        return engine.preprocess(bytes(item), spec)
    raise DataError(f"unsupported calibration item type {type(item).__name__}")


def _require_fp32(b: ModelBundle) -> None:
    if any(n.op is OpKind.Cast for n in b.graph.nodes):
        raise BundleError("expected an FP32 bundle without Cast boundaries")
    if any(e.dtype != "fp32" for e in b.graph.weights):
        raise BundleError("expected an FP32 bundle (weights are not fp32)")


# ---------------------------------------------------------------------------
# precision planning

@dataclass
class PrecisionPlan:
    """Which nodes stay FP32.  Inputs and outputs are always FP32 regardless
    of the excluded set; ids refer to the fused (fp32opt) graph."""

    excluded: set[str] = dc_field(default_factory=set)


def build_plan(g: Graph, profile: Optional[CalibrationProfile] = None,
               overrides: Iterable[str] = (), outlier_factor: float = 127.0,
               alias: Optional[dict[str, str]] = None) -> PrecisionPlan:
    """Default plan: user overrides plus the range-outlier heuristic (a node
    whose calibrated range exceeds ``outlier_factor`` times the graph median
    stays FP32)."""
    excluded = set(overrides)
    if profile is not None:
        alias = alias or {n.id: n.id for n in g.nodes}
        ranges = {}
        for n in g.nodes:
            if n.op in (OpKind.Const, OpKind.Input):
                continue
            src = alias.get(n.id, n.id)
            if src in profile.stats:
                ranges[n.id] = profile.range_for(src)
        positive = [r for r in ranges.values() if r > 0]
        if positive:
            median = float(np.median(positive))
            for nid, r in ranges.items():
                if median > 0 and r > outlier_factor * median:
                    excluded.add(nid)
    return PrecisionPlan(excluded=excluded)


# ---------------------------------------------------------------------------
# variant construction

def optimize_fp32(b: ModelBundle) -> ModelBundle:
    """The fp32opt variant: constant fusion, no precision change."""
    _require_fp32(b)
    g = fuse_constants(b.graph)
    validate(g)
    return b.with_graph(g, "fp32opt")


def convert_fp16(b: ModelBundle, plan: Optional[PrecisionPlan] = None) -> ModelBundle:
    """FP16 variant: non-excluded weights stored binary16, Cast(FP32->FP16)
    after each input, Cast(FP16->FP32) before each output and around
    excluded nodes."""
    _require_fp32(b)
    plan = plan or PrecisionPlan()
    g = fuse_constants(b.graph)
    region = _region_map(g, plan)
    _convert_const_entries_fp16(g, region)
    _insert_casts(g, region, target=DType.FP16)
    validate(g)
    return b.with_graph(g, "fp16")


def quantize_int8(b: ModelBundle, profile: CalibrationProfile,
                  plan: Optional[PrecisionPlan] = None,
                  percentile: Optional[float] = None) -> ModelBundle:
    """INT8 variant from a calibration profile.

    Weights: per-output-channel symmetric scales max|w_c|/127 (floored).
    Activations: per-tensor symmetric scales max(|min|,|max|)/127.
    Boundaries are Cast nodes carrying the activation scale.
    """
    _require_fp32(b)
    g, alias = fuse_constants_with_alias(b.graph)
    plan = plan or build_plan(g, profile, alias=alias)
    region = _region_map(g, plan)

    def scale_of(node_id: str) -> float:
        src = alias.get(node_id, node_id)
        try:
            return profile.scale_for(src, percentile)
        except CalibrationError:
            raise CalibrationError(f"missing calibration for node {node_id!r}")

    for n in g.nodes:
        if n.op is not OpKind.Const and region[n.id] == "low":
            n.attrs["out_scale"] = scale_of(n.id)

    _convert_const_entries_int8(g, region, scale_of)
    _insert_casts(g, region, target=DType.INT8, scale_of=scale_of)
    validate(g)
    return b.with_graph(g, "int8")


def _region_map(g: Graph, plan: PrecisionPlan) -> dict[str, str]:
    region: dict[str, str] = {}
    for n in g.nodes:
        if n.op is OpKind.Input:
            region[n.id] = "fp32"
        elif n.op is OpKind.Const:
            continue  # assigned from consumers below
        elif n.id in plan.excluded:
            region[n.id] = "fp32"
        else:
            region[n.id] = "low"
    consumers = g.consumers()
    for n in g.nodes:
        if n.op is OpKind.Const:
            regs = {region[c.id] for c in consumers[n.id]}
            region[n.id] = "low" if regs == {"low"} else "fp32"
    return region


def _convert_const_entries_fp16(g: Graph, region: dict[str, str]) -> None:
    for n in g.nodes:
        if n.op is OpKind.Const and region[n.id] == "low":
            entry = g.weights[n.weight_ref]
            g.weights[n.weight_ref] = WeightEntry(round_to_fp16(entry.array), "fp16")
        if n.op in _CONV_LIKE and region.get(n.id) == "low" and "bias_ref" in n.attrs:
            entry = g.weights[n.attrs["bias_ref"]]
            g.weights[n.attrs["bias_ref"]] = WeightEntry(round_to_fp16(entry.array), "fp16")


def _convert_const_entries_int8(g: Graph, region: dict[str, str], scale_of) -> None:
    nodes = g.node_map()
    consumers = g.consumers()
    kernel_scales: dict[int, np.ndarray] = {}

    for n in g.nodes:
        if n.op not in _CONV_LIKE or region[n.id] != "low":
            continue
        kernel = nodes[n.inputs[1]]
        entry = g.weights[kernel.weight_ref]
        axis = _KERNEL_AXIS[n.op]
        if kernel.weight_ref in kernel_scales:
            per_channel = kernel_scales[kernel.weight_ref]
        else:
            w = entry.array.astype(np.float64)
            reduce_axes = tuple(a for a in range(w.ndim) if a != axis)
            per_channel = np.maximum(np.abs(w).max(axis=reduce_axes), SCALE_FLOOR) / 127.0
            q = np.clip(np.rint(w / _expand(per_channel, w.ndim, axis)), -127, 127).astype(np.int8)
            g.weights[kernel.weight_ref] = WeightEntry(
                q, "int8", QuantParams(axis=axis, scales=tuple(float(s) for s in per_channel)))
            kernel_scales[kernel.weight_ref] = per_channel

        if "bias_ref" in n.attrs:
            s_in = scale_of(n.inputs[0])
            s_w = per_channel
            if n.op is OpKind.DepthwiseConv2D:
                s_w = np.repeat(per_channel, entry.array.shape[3])
            bias = g.weights[n.attrs["bias_ref"]].array.astype(np.float64)
            bias_scales = s_in * s_w
            bias_q = np.rint(bias / bias_scales).astype(np.int32)
            g.weights[n.attrs["bias_ref"]] = WeightEntry(
                bias_q, "int32",
                QuantParams(axis=0, scales=tuple(float(s) for s in bias_scales)))

    for n in g.nodes:
        if n.op is not OpKind.Const or region[n.id] != "low":
            continue
        entry = g.weights[n.weight_ref]
        if entry.dtype != "fp32":
            continue  # already handled as a kernel
        only_elementwise = all(c.op in (OpKind.AddV2, OpKind.Mul) for c in consumers[n.id])
        if not only_elementwise:
            continue
        c = entry.array.astype(np.float64)
        scale = max(float(np.abs(c).max()), SCALE_FLOOR) / 127.0
        q = np.clip(np.rint(c / scale), -127, 127).astype(np.int8)
        g.weights[n.weight_ref] = WeightEntry(q, "int8", QuantParams(scale=scale))


def _expand(vec: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.size
    return vec.reshape(shape)


def _insert_casts(g: Graph, region: dict[str, str], target: DType,
                  scale_of=None) -> None:
    """Inserts Cast nodes on every edge whose endpoints live in different
    precision regions, and after outputs that live in the low region."""
    new_nodes: list[Node] = []
    cast_ids: dict[tuple[str, str], str] = {}

    def boundary(producer: str, want: str) -> str:
        key = (producer, want)
        if key in cast_ids:
            return cast_ids[key]
        cast_id = f"{producer}__cast_{want}"
        attrs = {"to": want}
        if want == DType.INT8.value:
            attrs["scale"] = scale_of(producer)
        cast_ids[key] = cast_id
        new_nodes.append(Node(id=cast_id, op=OpKind.Cast, inputs=[producer], attrs=attrs))
        return cast_id

    low = target.value
    for n in g.nodes:
        if n.op in (OpKind.Input, OpKind.Const):
            continue
        for idx, src in enumerate(list(n.inputs)):
            src_region = region[src]
            my_region = region[n.id]
            if src_region == my_region:
                continue
            want = low if my_region == "low" else DType.FP32.value
            n.inputs[idx] = boundary(src, want)
    g.outputs = [
        boundary(o, DType.FP32.value) if region[o] == "low" else o
        for o in g.outputs
    ]
    if not new_nodes:
        return
    # splice casts in topological position: rebuild ordered list
    order: list[Node] = []
    pending = {c.inputs[0]: [] for c in new_nodes}
    for c in new_nodes:
        pending[c.inputs[0]].append(c)
    for n in g.nodes:
        order.append(n)
        for c in pending.get(n.id, ()):  # casts follow their producer
            order.append(c)
    g.nodes = order


def variant_path(src: Path, suffix: str) -> Path:
    """Sibling directory '<name>-<suffix>' next to the source bundle."""
    src = Path(src)
    return src.with_name(f"{src.name}-{suffix}")


def write_variants(src_bundle_path, precisions: Iterable[str],
                   calib_images: Iterable = (), plan: Optional[PrecisionPlan] = None,
                   percentile: Optional[float] = None) -> dict[str, Path]:
    """Produces the requested variants alongside the source bundle."""
    from .bundle import save_bundle

    src_path = Path(src_bundle_path)
    base = load_bundle(src_path)
    out: dict[str, Path] = {}
    profile = None
    for precision in precisions:
        if precision == "fp32opt":
            variant = optimize_fp32(base)
        elif precision == "fp16":
            variant = convert_fp16(base, plan)
        elif precision == "int8":
            if profile is None:
                profile = calibrate(base, calib_images)
            variant = quantize_int8(base, profile, plan, percentile)
        else:
            raise BundleError(f"unknown precision {precision!r}")
        dest = variant_path(src_path, precision)
        save_bundle(variant, dest)
        out[precision] = dest
    return out
