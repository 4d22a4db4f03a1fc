"""Size, latency, and throughput benchmarking plus watt-log power reports.

Timing uses the monotonic clock and excludes image decode (inputs are
pre-generated tensors), so variant ratios isolate the model change.
Per-image latency divides batch latency by the effective batch size
N / ceil(N/B), which accounts for a ragged final batch; throughput times
per-image latency is therefore 1 by construction.

Watt logs are external text files, one sample per line:

    <ISO-8601 timestamp>, <watts>

e.g. ``2026-08-14T10:00:00, 5.2``.  Windows (idle plus one interval per
variant) select samples by timestamp; the report gives window means and
variant/original ratios.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import engine
from .bundle import ModelBundle, size_of
from .errors import BenchError, EdgeInferError, PowerLogError
from .tensor import Tensor


@dataclass
class BenchReport:
    variant: str
    container_bytes: int
    payload_bytes: int
    ms_per_batch: float
    ms_per_image: float
    throughput_ips: float
    batch_size: int
    image_count: int
    warmup: int
    reps: int
    partial: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _synthetic_inputs(b: ModelBundle, count: int, seed: int) -> list[Tensor]:
    spec = next(iter(b.graph.input_specs.values()))
    rng = np.random.default_rng(seed)
    lo, hi = (-1.0, 1.0) if b.preprocess.value_range == "minus-one-one" else (0.0, 1.0)
    return [Tensor.from_array(rng.uniform(lo, hi, size=spec.shape).astype(np.float32))
            for _ in range(count)]


def bench(b: ModelBundle, images: Union[int, Sequence[Tensor]] = 64,
          batch_size: int = 32, warmup: int = 3, reps: int = 10,
          seed: int = 0) -> BenchReport:
    """Times `reps` passes over the image set in batches of `batch_size`
    after `warmup` discarded forwards."""
    if isinstance(images, int):
        if images < 1:
            raise BenchError("image count must be >= 1")
        inputs = _synthetic_inputs(b, images, seed)
    else:
        inputs = list(images)
        if not inputs:
            raise BenchError("image list is empty")
    if batch_size < 1:
        raise BenchError("batch size must be >= 1")
    if warmup < 1:
        raise BenchError("warmup must be >= 1 iteration")

    n = len(inputs)
    n_batches = math.ceil(n / batch_size)
    effective = n / n_batches
    batches = [inputs[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]

    partial = False
    timed_batches = 0
    total_s = 0.0
    images_done = 0
    try:
        for _ in range(warmup):
            engine.run_forward(b, inputs[0])
        for _ in range(reps):
            for batch in batches:
                t0 = time.perf_counter()
                for t in batch:
                    engine.run_forward(b, t)
                total_s += time.perf_counter() - t0
                timed_batches += 1
                images_done += len(batch)
    except EdgeInferError:
        partial = True
    if timed_batches == 0:
        raise BenchError("no timed batches completed", code="bench-aborted")

    ms_per_batch = 1000.0 * total_s / timed_batches
    ms_per_image = 1000.0 * total_s / images_done
    throughput = images_done / total_s if total_s > 0 else float("inf")
    container, payload = size_of(b)
    return BenchReport(
        variant=b.variant, container_bytes=container, payload_bytes=payload,
        ms_per_batch=ms_per_batch, ms_per_image=ms_per_image,
        throughput_ips=throughput, batch_size=batch_size, image_count=n,
        warmup=warmup, reps=reps, partial=partial)


ORIGINAL_VARIANTS = ("original", "fp32")


def compare_variants(reports: list[BenchReport]) -> dict:
    """Per-variant size/latency/throughput ratios against the original."""
    if len(reports) < 2:
        raise BenchError("need at least two reports to compare",
                         code="missing-original")
    original = next((r for r in reports if r.variant in ORIGINAL_VARIANTS), None)
    if original is None:
        raise BenchError("no report for the original variant",
                         code="missing-original")
    rows = {}
    for r in reports:
        rows[r.variant] = {
            "payload_ratio": r.payload_bytes / original.payload_bytes,
            "container_ratio": r.container_bytes / original.container_bytes,
            "latency_ratio": r.ms_per_image / original.ms_per_image,
            "throughput_ratio": r.throughput_ips / original.throughput_ips,
        }
    return {"original": original.variant, "rows": rows}


def render_comparison(comparison: dict) -> str:
    cols = ("payload_ratio", "container_ratio", "latency_ratio", "throughput_ratio")
    width = max(len(v) for v in comparison["rows"]) + 2
    lines = ["variant".ljust(width) + "  ".join(f"{c:>17}" for c in cols)]
    for variant, row in comparison["rows"].items():
        lines.append(variant.ljust(width)
                     + "  ".join(f"{row[c]:>17.4f}" for c in cols))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# power logs

@dataclass
class PowerSample:
    when: datetime
    watts: float


@dataclass
class PowerWindow:
    name: str
    start: datetime
    end: datetime


@dataclass
class PowerReport:
    idle_w: Optional[float]
    window_w: dict[str, float]          # window name -> mean watts
    ratios: dict[str, float]            # variant -> variant/original

    def as_dict(self) -> dict:
        return {"idle_w": self.idle_w, "window_w": self.window_w,
                "ratios": self.ratios}


def parse_power_log(text: str) -> list[PowerSample]:
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise PowerLogError(f"line {lineno}: expected 'timestamp, watts'",
                                code="unparseable-sample")
        try:
            when = datetime.fromisoformat(parts[0].strip())
            watts = float(parts[1].strip())
        except ValueError:
            raise PowerLogError(f"line {lineno}: cannot parse {line!r}",
                                code="unparseable-sample")
        if not watts > 0:
            raise PowerLogError(f"line {lineno}: watts must be positive",
                                code="unparseable-sample")
        samples.append(PowerSample(when=when, watts=watts))
    return samples


def power_report(samples: list[PowerSample], windows: list[PowerWindow],
                 original: str = "original") -> PowerReport:
    """Mean watts per window; ratio = variant mean / original mean.  Every
    window needs >= 3 samples and windows must not overlap."""
    for i, a in enumerate(windows):
        for w2 in windows[i + 1:]:
            if a.start <= w2.end and w2.start <= a.end:
                raise PowerLogError(
                    f"windows {a.name!r} and {w2.name!r} overlap",
                    code="overlapping-windows")
    means: dict[str, float] = {}
    ordered = sorted(samples, key=lambda s: s.when)  # line order must not matter
    for w in windows:
        inside = [s.watts for s in ordered if w.start <= s.when <= w.end]
        if len(inside) < 3:
            raise PowerLogError(
                f"window {w.name!r} contains {len(inside)} samples; need >= 3",
                code="empty-window")
        means[w.name] = float(np.mean(inside))
    idle = means.get("idle")
    ratios = {}
    if original in means:
        for name, watts in means.items():
            if name in ("idle", original):
                continue
            ratios[name] = watts / means[original]
    return PowerReport(idle_w=idle, window_w=means, ratios=ratios)


def render_power_report(report: PowerReport) -> str:
    lines = ["window          mean_w   ratio_vs_original"]
    for name, watts in report.window_w.items():
        ratio = report.ratios.get(name)
        tail = f"{ratio:18.2f}" if ratio is not None else " " * 18
        lines.append(f"{name:<14}{watts:>8.2f}{tail}")
    return "\n".join(lines)


def load_power_log(path) -> list[PowerSample]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PowerLogError(f"cannot read power log {path}: {exc}",
                            code="unreadable-log")
    return parse_power_log(text)
