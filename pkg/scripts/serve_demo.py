"""Start the diagnosis gateway on a demo model, building one if needed.

If --models-dir doesn't hold a trained bundle yet, a small pipeline run
(fewer images, fewer epochs than run_desk_pipeline.py) creates it first, so
`python scripts/serve_demo.py` always ends with a serving gateway.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from edgeinfer.bundle import save_bundle
from edgeinfer.data import split
from edgeinfer.micronet import build_micro_backbone
from edgeinfer.quantize import write_variants
from edgeinfer.server import resolve_server_config, serve
from edgeinfer.synth import generate_synthetic
from edgeinfer.train import TrainConfig, attach_head, extract_features, train_head


def build_demo_models(root: Path) -> Path:
    models = root / "models"
    if (models / "model" / "manifest.json").exists():
        return models
    print("no bundle found; training a demo model first...")
    m = generate_synthetic(root / "data", per_class=60, seed=19)
    plan = split(m, folds=5, seed=0)
    backbone = build_micro_backbone(seed=0)
    X, y, paths = extract_features(backbone, m, cache_dir=root / "cache")
    row = {p: i for i, p in enumerate(paths)}
    fold = plan.assignment[0]
    tr = [row[p] for p, b in fold.items() if b == "train"]
    va = [row[p] for p, b in fold.items() if b == "val"]
    head, _ = train_head(X[tr], y[tr], TrainConfig(epochs=10), val=(X[va], y[va]))
    models.mkdir(parents=True, exist_ok=True)
    save_bundle(attach_head(backbone, head, m.classes), models / "model")
    calib = sorted(m.resolve(it) for it in m.items if fold[it.path] == "train")
    write_variants(models / "model", ("fp32opt", "fp16", "int8"), calib_images=calib)
    return models


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="demo_run")
    ap.add_argument("--host", default=None)
    ap.add_argument("--port", type=int, default=None)
    ap.add_argument("--static-dir", default=None,
                    help="serve a built web UI from this directory")
    args = ap.parse_args()

    models = build_demo_models(Path(args.workdir))
    cfg = resolve_server_config(host=args.host, port=args.port,
                                models_dir=models, static_dir=args.static_dir)
    print(f"serving {models} on {cfg.host}:{cfg.port}")
    serve(cfg)


if __name__ == "__main__":
    main()
