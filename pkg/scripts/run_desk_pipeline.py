"""Run the whole desk-scale pipeline in one go.

Generates the synthetic two-class set, trains a head on the frozen backbone,
derives the fp32opt/fp16/int8 variants, then reports payload sizes and
held-out top-1 agreement of every variant against the original. The output
directory is left in place so `edgeinfer serve --models-dir <out>/models`
can serve the result directly.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from edgeinfer import engine
from edgeinfer.bundle import load_bundle, save_bundle, size_of
from edgeinfer.data import split
from edgeinfer.micronet import build_micro_backbone
from edgeinfer.quantize import write_variants
from edgeinfer.synth import generate_synthetic
from edgeinfer.train import TrainConfig, attach_head, extract_features, train_head


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="desk_run", help="working directory")
    ap.add_argument("--per-class", type=int, default=250)
    ap.add_argument("--data-seed", type=int, default=19)
    ap.add_argument("--backbone-seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--held-out", type=int, default=100, help="held-out images per class")
    args = ap.parse_args()

    t0 = time.perf_counter()
    out = Path(args.out)
    m = generate_synthetic(out / "data", per_class=args.per_class, seed=args.data_seed)
    plan = split(m, folds=5, seed=0)
    plan.save(out / "plan.json")
    print(f"dataset: {len(m.items)} images, classes {m.classes}")

    backbone = build_micro_backbone(seed=args.backbone_seed)
    X, y, paths = extract_features(backbone, m, cache_dir=out / "cache")
    row = {p: i for i, p in enumerate(paths)}
    fold = plan.assignment[0]
    tr = [row[p] for p, b in fold.items() if b == "train"]
    va = [row[p] for p, b in fold.items() if b == "val"]
    cfg = TrainConfig(epochs=args.epochs)
    head, log = train_head(X[tr], y[tr], cfg, val=(X[va], y[va]))
    best = max(log, key=lambda r: r.val_acc)
    print(f"trained {cfg.epochs} epochs; best val accuracy {best.val_acc:.4f} "
          f"at epoch {best.epoch}")

    models = out / "models"
    models.mkdir(exist_ok=True)
    trained = attach_head(backbone, head, m.classes)
    save_bundle(trained, models / "model")
    calib = sorted(m.resolve(it) for it in m.items if fold[it.path] == "train")
    write_variants(models / "model", ("fp32opt", "fp16", "int8"), calib_images=calib)

    held = generate_synthetic(out / "held", per_class=args.held_out, seed=99)
    raws = [(held.resolve(it).read_bytes(), held.classes[it.class_index])
            for it in held.items]
    bundles = {name: load_bundle(models / d) for name, d in [
        ("original", "model"), ("fp32opt", "model-fp32opt"),
        ("fp16", "model-fp16"), ("int8", "model-int8")]}
    ref = [engine.predict(bundles["original"], raw).label for raw, _ in raws]
    acc = sum(r == cls for r, (_, cls) in zip(ref, raws)) / len(raws)
    print(f"held-out({len(raws)}): original accuracy {acc:.4f}")

    base_payload = size_of(bundles["original"])[1]
    print(f"{'variant':10s} {'payload':>10s} {'ratio':>7s} {'agreement':>10s}")
    for name, b in bundles.items():
        payload = size_of(b)[1]
        got = [engine.predict(b, raw).label for raw, _ in raws]
        agree = sum(g == r for g, r in zip(got, ref)) / len(ref)
        print(f"{name:10s} {payload:10d} {payload / base_payload:7.4f} {agree:10.4f}")
    print(f"done in {time.perf_counter() - t0:.1f}s; artifacts under {out}/")


if __name__ == "__main__":
    main()
