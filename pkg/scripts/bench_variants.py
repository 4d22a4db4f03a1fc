"""Benchmark every bundle variant in a models directory.

Expects the layout produced by run_desk_pipeline.py / `edgeinfer quantize`:
a `model/` bundle plus `model-<precision>/` siblings. Prints per-variant
latency, throughput, and payload, then the ratios against the original.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from edgeinfer.bench import bench, compare_variants, render_comparison
from edgeinfer.bundle import load_bundle


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models-dir", default="desk_run/models")
    ap.add_argument("--images", type=int, default=64)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--warmup", type=int, default=2)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    reports = []
    for path in sorted(Path(args.models_dir).iterdir()):
        if not (path / "manifest.json").exists():
            continue
        b = load_bundle(path)
        r = bench(b, images=args.images, batch_size=args.batch_size,
                  warmup=args.warmup, reps=args.reps)
        reports.append(r)
        print(f"{r.variant:10s} {r.ms_per_image:8.3f} ms/img "
              f"{r.throughput_ips:8.1f} img/s  payload {r.payload_bytes}")

    print()
    print(render_comparison(compare_variants(reports)))


if __name__ == "__main__":
    main()
