"""Command-line entrypoint exposing every pipeline stage.

Exit codes: 0 success; 2 usage errors (argparse); 3 dataset errors;
4 bundle/graph errors; 5 calibration errors; 6 evaluation/benchmark/power
errors; 7 any other toolkit error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bundle import load_bundle, save_bundle, size_of
from .errors import (BenchError, BundleError, CalibrationError, DataError,
                     EdgeInferError, GraphError, MetricsError, PowerLogError)
from .graph import op_census

EXIT_CODES = [
    ((DataError,), 3),
    ((BundleError, GraphError), 4),
    ((CalibrationError,), 5),
    ((MetricsError, BenchError, PowerLogError), 6),
    ((EdgeInferError,), 7),
]


def _write_report(path, doc) -> None:
    if path:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


# ---------------------------------------------------------------------------
# handlers

def cmd_model_inspect(args) -> int:
    b = load_bundle(args.bundle)
    container, payload = size_of(b)
    census = dict(sorted(op_census(b.graph).items()))
    params = int(sum(e.array.size for e in b.graph.weights))
    print(f"name:      {b.name}")
    print(f"variant:   {b.variant}")
    print(f"classes:   {', '.join(b.classes) if b.classes else '(none)'}")
    print(f"params:    {params}")
    print(f"container: {container} bytes  payload: {payload} bytes")
    print("census:    " + ", ".join(f"{k}={v}" for k, v in census.items()))
    _write_report(args.out, {
        "name": b.name, "variant": b.variant, "classes": b.classes,
        "params": params, "container_bytes": container,
        "payload_bytes": payload, "census": census,
    })
    return 0


def cmd_model_validate(args) -> int:
    b = load_bundle(args.bundle)  # raises on any structural problem
    print(f"OK: {b.name} ({b.variant}), {len(b.graph.nodes)} nodes")
    return 0


def cmd_dataset_ingest(args) -> int:
    from .data import ingest, save_manifest

    m = ingest(args.root)
    for w in m.warnings:
        print(f"warning: {w}", file=sys.stderr)
    save_manifest(m, args.out)
    counts = m.counts_per_class()
    print(f"{len(m.items)} items across {len(m.classes)} classes "
          f"({', '.join(f'{c}={n}' for c, n in counts.items())}); "
          f"{len(m.warnings)} warnings")
    return 0


def cmd_dataset_synth(args) -> int:
    from .data import save_manifest
    from .synth import generate_synthetic

    m = generate_synthetic(args.root, per_class=args.per_class, seed=args.seed,
                           size=args.size)
    if args.out:
        save_manifest(m, args.out)
    print(f"wrote {len(m.items)} synthetic images under {args.root}")
    return 0


def cmd_dataset_augment(args) -> int:
    from .data import augment, load_manifest, save_manifest

    m = load_manifest(args.manifest)
    out = augment(m, factor=args.factor, seed=args.seed, out_root=args.out_root)
    save_manifest(out, args.out)
    print(f"{len(m.items)} items -> {len(out.items)} items (factor {args.factor})")
    return 0


def cmd_dataset_split(args) -> int:
    from .data import load_manifest, split

    m = load_manifest(args.manifest)
    plan = split(m, folds=args.folds, seed=args.seed)
    plan.save(args.out)
    sizes = [(len(plan.paths(f, "train")), len(plan.paths(f, "val")),
              len(plan.paths(f, "test"))) for f in range(plan.fold_count)]
    print(f"{plan.fold_count} folds; train/val/test sizes: {sizes}")
    return 0


def cmd_train_head(args) -> int:
    from .data import SplitPlan, load_manifest
    from .train import TrainConfig, attach_head, extract_features, train_head

    backbone = load_bundle(args.backbone)
    m = load_manifest(args.manifest)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                      epochs=args.epochs, seed=args.seed)
    X, y, paths = extract_features(backbone, m, args.cache_dir)
    row = {p: i for i, p in enumerate(paths)}
    if args.plan:
        plan = SplitPlan.load(args.plan)
        fold = plan.assignment[args.fold]
        tr = [row[p] for p, b in fold.items() if b == "train"]
        va = [row[p] for p, b in fold.items() if b == "val"]
        head, log = train_head(X[tr], y[tr], cfg, val=(X[va], y[va]))
    else:
        head, log = train_head(X, y, cfg)
    trained = attach_head(backbone, head, m.classes)
    save_bundle(trained, args.out)
    best = max(log, key=lambda r: r.val_acc)
    print(f"trained {cfg.epochs} epochs; best val accuracy "
          f"{best.val_acc:.4f} at epoch {best.epoch}; bundle -> {args.out}")
    if args.log_out:
        from .train import render_training_log
        Path(args.log_out).write_text(render_training_log(log) + "\n",
                                      encoding="utf-8")
    return 0


def cmd_quantize(args) -> int:
    from .quantize import (PrecisionPlan, build_plan, calibrate, convert_fp16,
                           fuse_constants_with_alias, optimize_fp32,
                           quantize_int8)

    src = load_bundle(getattr(args, "in"))
    plan = PrecisionPlan(excluded=set(args.exclude)) if args.exclude else None
    if args.precision == "fp32opt":
        variant = optimize_fp32(src)
    elif args.precision == "fp16":
        variant = convert_fp16(src, plan)
    else:
        if not args.calib_manifest and not args.calib_dir:
            raise CalibrationError("int8 needs --calib-manifest or --calib-dir",
                                   code="missing-calibration")
        if args.calib_manifest:
            from .data import load_manifest
            m = load_manifest(args.calib_manifest)
            images = [m.resolve(it) for it in m.items]
        else:
            from .data import ingest
            m = ingest(args.calib_dir)
            images = [m.resolve(it) for it in m.items]
        if args.calib_limit:
            images = images[:args.calib_limit]
        profile = calibrate(src, images, seed=args.seed)
        if plan is None:
            fused, alias = fuse_constants_with_alias(src.graph)
            plan = build_plan(fused, profile, alias=alias)
        variant = quantize_int8(src, profile, plan, percentile=args.percentile)
    save_bundle(variant, args.out)
    _, src_payload = size_of(src)
    _, new_payload = size_of(variant)
    print(f"{args.precision} bundle -> {args.out}; payload ratio "
          f"{new_payload / src_payload:.4f} ({new_payload}/{src_payload} bytes)")
    return 0


def cmd_infer(args) -> int:
    from . import engine

    b = load_bundle(args.model)
    result = engine.predict(b, Path(args.image).read_bytes())
    print(f"{result.label} {result.confidence * 100:.2f}%")
    _write_report(args.out, {
        "label": result.label, "confidence": result.confidence,
        "model": b.variant, "latency_ms": result.latency_ms,
    })
    return 0


def cmd_eval(args) -> int:
    from .data import SplitPlan, load_manifest
    from .metrics import cross_validate, render_confusion
    from .train import TrainConfig

    backbone = load_bundle(args.backbone)
    m = load_manifest(args.manifest)
    plan = SplitPlan.load(args.plan)
    cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                      epochs=args.epochs, seed=args.seed)
    report = cross_validate(backbone, m, plan, cfg, cache_dir=args.cache_dir)
    for fr in report.folds:
        vals = ", ".join(f"{k}={v:.4f}" for k, v in sorted(fr.report.values.items()))
        print(f"fold {fr.fold}: {vals}")
        if args.matrices:
            print(render_confusion(fr.matrix))
    agg = ", ".join(f"{k}={report.mean[k]:.4f}±{report.std[k]:.4f}"
                    for k in sorted(report.mean))
    print(f"aggregate: {agg}")
    _write_report(args.out, report.as_dict())
    return 0


def cmd_bench(args) -> int:
    from .bench import bench

    b = load_bundle(args.model)
    report = bench(b, images=args.images, batch_size=args.batch_size,
                   warmup=args.warmup, reps=args.reps, seed=args.seed)
    print(f"{report.variant}: {report.ms_per_image:.3f} ms/image, "
          f"{report.ms_per_batch:.3f} ms/batch, "
          f"{report.throughput_ips:.1f} images/s, "
          f"payload {report.payload_bytes} bytes")
    _write_report(args.out, report.as_dict())
    return 0


def cmd_power_report(args) -> int:
    from datetime import datetime

    from .bench import PowerWindow, load_power_log, power_report, render_power_report

    windows = []
    for w in args.window:
        try:
            name, start, end = w.split(",")
            windows.append(PowerWindow(name=name.strip(),
                                       start=datetime.fromisoformat(start.strip()),
                                       end=datetime.fromisoformat(end.strip())))
        except ValueError:
            raise PowerLogError(f"bad --window {w!r}; expected name,start,end",
                                code="bad-window")
    samples = load_power_log(args.log)
    report = power_report(samples, windows, original=args.original)
    print(render_power_report(report))
    _write_report(args.out, report.as_dict())
    return 0


def cmd_serve(args) -> int:
    from .server import resolve_server_config, serve

    cfg = resolve_server_config(host=args.host, port=args.port,
                                models_dir=args.models_dir,
                                max_concurrent=args.max_concurrent,
                                static_dir=args.static_dir,
                                audit_log=args.audit_log)
    serve(cfg)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeinfer",
                                description="edge-inference toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model", help="bundle inspection")
    msub = model.add_subparsers(dest="subcommand", required=True)
    mi = msub.add_parser("inspect", help="print bundle summary and census")
    mi.add_argument("--bundle", required=True)
    mi.add_argument("--out", help="write structured report JSON")
    mi.set_defaults(func=cmd_model_inspect)
    mv = msub.add_parser("validate", help="load and validate a bundle")
    mv.add_argument("--bundle", required=True)
    mv.set_defaults(func=cmd_model_validate)

    ds = sub.add_parser("dataset", help="dataset operations")
    dsub = ds.add_subparsers(dest="subcommand", required=True)
    di = dsub.add_parser("ingest", help="scan class folders into a manifest")
    di.add_argument("--root", required=True)
    di.add_argument("--out", required=True, help="manifest file to write")
    di.set_defaults(func=cmd_dataset_ingest)
    dy = dsub.add_parser("synth", help="generate the synthetic two-class set")
    dy.add_argument("--root", required=True)
    dy.add_argument("--per-class", type=int, default=250)
    dy.add_argument("--seed", type=int, default=0)
    dy.add_argument("--size", type=int, default=32)
    dy.add_argument("--out", help="optional manifest file to write")
    dy.set_defaults(func=cmd_dataset_synth)
    da = dsub.add_parser("augment", help="expand a manifest by seeded augmentation")
    da.add_argument("--manifest", required=True)
    da.add_argument("--factor", type=int, required=True)
    da.add_argument("--seed", type=int, default=0)
    da.add_argument("--out-root", help="write derived images here (default: dataset root)")
    da.add_argument("--out", required=True, help="augmented manifest file")
    da.set_defaults(func=cmd_dataset_augment)
    dp = dsub.add_parser("split", help="stratified fold split plan")
    dp.add_argument("--manifest", required=True)
    dp.add_argument("--folds", type=int, default=5)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--out", required=True, help="split plan JSON")
    dp.set_defaults(func=cmd_dataset_split)

    th = sub.add_parser("train-head", help="train a classifier head on frozen features")
    th.add_argument("--backbone", required=True, help="backbone bundle directory")
    th.add_argument("--manifest", required=True)
    th.add_argument("--plan", help="split plan JSON (train/val buckets)")
    th.add_argument("--fold", type=int, default=0)
    th.add_argument("--cache-dir", help="feature cache directory")
    th.add_argument("--batch-size", type=int, default=32)
    th.add_argument("--learning-rate", type=float, default=0.001)
    th.add_argument("--epochs", type=int, default=50)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", required=True, help="trained bundle directory")
    th.add_argument("--log-out", help="write the epoch log table here")
    th.set_defaults(func=cmd_train_head)

    q = sub.add_parser("quantize", help="derive an optimized variant")
    q.add_argument("--in", required=True, help="source FP32 bundle directory")
    q.add_argument("--precision", required=True,
                   choices=["fp32opt", "fp16", "int8"])
    q.add_argument("--calib-manifest", help="calibration manifest (int8)")
    q.add_argument("--calib-dir", help="calibration image folder (int8)")
    q.add_argument("--calib-limit", type=int, help="cap calibration images")
    q.add_argument("--percentile", type=float,
                   help="percentile activation ranges, e.g. 99.9 (default min-max)")
    q.add_argument("--exclude", action="append", default=[],
                   help="node id to keep FP32 (repeatable)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help="variant bundle directory")
    q.set_defaults(func=cmd_quantize)

    inf = sub.add_parser("infer", help="classify one image")
    inf.add_argument("--model", required=True, help="bundle directory")
    inf.add_argument("--image", required=True)
    inf.add_argument("--out", help="structured result JSON")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="cross-validated evaluation")
    ev.add_argument("--backbone", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--plan", required=True)
    ev.add_argument("--cache-dir")
    ev.add_argument("--batch-size", type=int, default=32)
    ev.add_argument("--learning-rate", type=float, default=0.001)
    ev.add_argument("--epochs", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--matrices", action="store_true",
                    help="print per-fold confusion matrices")
    ev.add_argument("--out", help="structured report JSON")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="latency/throughput/size benchmark")
    be.add_argument("--model", required=True)
    be.add_argument("--images", type=int, default=64)
    be.add_argument("--batch-size", type=int, default=32)
    be.add_argument("--warmup", type=int, default=3)
    be.add_argument("--reps", type=int, default=10)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", help="structured report JSON")
    be.set_defaults(func=cmd_bench)

    pw = sub.add_parser("power-report", help="window means + ratios from a watt log")
    pw.add_argument("--log", required=True, help="watt log file")
    pw.add_argument("--window", action="append", required=True,
                    help="'name,start,end' with ISO-8601 bounds (repeatable)")
    pw.add_argument("--original", default="original",
                    help="window name treated as the ratio denominator")
    pw.add_argument("--out", help="structured report JSON")
    pw.set_defaults(func=cmd_power_report)

    sv = sub.add_parser("serve", help="run the HTTP gateway")
    sv.add_argument("--host")
    sv.add_argument("--port", type=int)
    sv.add_argument("--models-dir")
    sv.add_argument("--max-concurrent", type=int)
    sv.add_argument("--static-dir")
    sv.add_argument("--audit-log", help="append sha256 of uploads to this file")
    sv.set_defaults(func=cmd_serve)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EdgeInferError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        for kinds, code in EXIT_CODES:
            if isinstance(exc, kinds):
                return code
        return 7


if __name__ == "__main__":
    sys.exit(main())
