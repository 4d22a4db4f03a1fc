"""Dataset ingestion, seeded augmentation, and stratified fold splitting.

A dataset is a directory with one subdirectory per class.  Manifests are
plain text tables (path, class, origin, seed), one row per image, paths
relative to the dataset root.  Augmented rows carry the integer seed that
regenerates them; their filenames keep the original stem plus an ``__augNN``
suffix, which is also how the splitter groups descendants with their
original (leakage guard).

Splitting reconciles "5-fold cross-validation" with a fixed 70/20/10 split
as five independent seeded stratified shuffles: five disjoint 10% test folds
cannot cover the data, so each fold is an independent repartition.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image, ImageEnhance, UnidentifiedImageError

from .errors import DataError

IMAGE_EXTS = {".png", ".jpg", ".jpeg"}
RATIOS = (0.7, 0.2, 0.1)
BUCKETS = ("train", "val", "test")
ROTATION_DEG = 30.0
CONTRAST_RANGE = (0.7, 1.3)
ZOOM_RANGE = (0.8, 1.2)

_AUG_SUFFIX = re.compile(r"__aug\d+$")


@dataclass
class DatasetItem:
    path: str          # posix path relative to the dataset root
    class_index: int
    origin: str = "original"   # "original" | "augmented"
    seed: int = 0               # regeneration seed for augmented items

    @property
    def group_key(self) -> str:
        """Original items and their augmented descendants share a key."""
        p = Path(self.path)
        stem = _AUG_SUFFIX.sub("", p.stem)
        return str(p.parent / stem)


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    items: list[DatasetItem]
    warnings: list[str] = dc_field(default_factory=list)

    def counts_per_class(self) -> dict[str, int]:
        out = {c: 0 for c in self.classes}
        for it in self.items:
            out[self.classes[it.class_index]] += 1
        return out

    def resolve(self, item: DatasetItem) -> Path:
        return Path(self.root) / item.path


def ingest(root) -> DatasetManifest:
    """Builds a manifest from class-named subdirectories.  Non-image and
    unreadable files are skipped with a warning; a class directory with no
    usable image is an error."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise DataError(f"no class directories under {root}", code="empty-dataset")
    classes = [d.name for d in class_dirs]
    items: list[DatasetItem] = []
    warnings: list[str] = []
    for idx, d in enumerate(class_dirs):
        found = 0
        for f in sorted(d.iterdir()):
            if not f.is_file():
                continue
            if f.suffix.lower() not in IMAGE_EXTS:
                warnings.append(f"skipped non-image file: {f.relative_to(root)}")
                continue
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError):
                warnings.append(f"skipped unreadable image: {f.relative_to(root)}")
                continue
            items.append(DatasetItem(path=f.relative_to(root).as_posix(), class_index=idx))
            found += 1
        if found == 0:
            raise DataError(f"class directory {d.name!r} has no readable images",
                            code="empty-class-directory")
    return DatasetManifest(root=root, classes=classes, items=items, warnings=warnings)


def save_manifest(m: DatasetManifest, path) -> None:
    lines = ["# edgeinfer dataset manifest v1",
             "# columns: path\tclass\torigin\tseed"]
    for it in m.items:
        lines.append(f"{it.path}\t{m.classes[it.class_index]}\t{it.origin}\t{it.seed}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, root=None) -> DatasetManifest:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    rows: list[tuple[str, str, str, int]] = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}", code="unreadable-manifest")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"manifest line {lineno}: expected 4 tab-separated fields")
        rows.append((parts[0], parts[1], parts[2], int(parts[3])))
    classes = sorted({r[1] for r in rows})
    index = {c: i for i, c in enumerate(classes)}
    items = [DatasetItem(path=p, class_index=index[c], origin=o, seed=s)
             for p, c, o, s in rows]
    return DatasetManifest(root=root, classes=classes, items=items)


# ---------------------------------------------------------------------------
# augmentation

def _item_seed(base_seed: int, item_index: int, k: int) -> int:
    # flat integer so a manifest row alone regenerates its image
    return base_seed * 1_000_000 + item_index * 1_000 + k


def _mean_fill(img: Image.Image) -> tuple[int, int, int]:
    arr = np.asarray(img, dtype=np.float64)
    return tuple(int(round(v)) for v in arr.reshape(-1, arr.shape[-1]).mean(axis=0))


def _zoom(img: Image.Image, factor: float, fill) -> Image.Image:
    w, h = img.size
    cw, ch = max(1, round(w / factor)), max(1, round(h / factor))
    if factor >= 1.0:
        left, top = (w - cw) // 2, (h - ch) // 2
        return img.crop((left, top, left + cw, top + ch)).resize((w, h), Image.BILINEAR)
    canvas = Image.new("RGB", (cw, ch), fill)
    canvas.paste(img, ((cw - w) // 2, (ch - h) // 2))
    return canvas.resize((w, h), Image.BILINEAR)


def augment_image(img: Image.Image, seed: int) -> Image.Image:
    """Seeded rotation (±30°), contrast (0.7–1.3x), zoom (0.8–1.2x),
    applied in that fixed order."""
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    contrast = float(rng.uniform(*CONTRAST_RANGE))
    zoom = float(rng.uniform(*ZOOM_RANGE))
    img = img.convert("RGB")
    fill = _mean_fill(img)
    out = img.rotate(angle, resample=Image.BILINEAR, fillcolor=fill)
    out = ImageEnhance.Contrast(out).enhance(contrast)
    return _zoom(out, zoom, fill)


def augment(m: DatasetManifest, factor: int, seed: int,
            out_root=None) -> DatasetManifest:
    """Each original yields (factor - 1) derived images plus itself, so the
    result has factor x the original count.  Fully reproducible from seed."""
    if factor < 1:
        raise DataError(f"augmentation factor must be >= 1, got {factor}",
                        code="invalid-factor")
    out_root = Path(out_root) if out_root is not None else Path(m.root)
    originals = [it for it in m.items if it.origin == "original"]
    items = list(m.items)
    if factor == 1:
        return DatasetManifest(root=out_root, classes=list(m.classes), items=items)
    for idx, it in enumerate(originals):
        src = Image.open(m.resolve(it)).convert("RGB")
        stem = Path(it.path).stem
        parent = Path(it.path).parent
        for k in range(1, factor):
            s = _item_seed(seed, idx, k)
            out_rel = parent / f"{stem}__aug{k:02d}.png"
            dest = out_root / out_rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            augment_image(src, s).save(dest, format="PNG")
            items.append(DatasetItem(path=out_rel.as_posix(), class_index=it.class_index,
                                     origin="augmented", seed=s))
        src.close()
    items.sort(key=lambda i: (i.class_index, i.path))
    return DatasetManifest(root=out_root, classes=list(m.classes), items=items)


# ---------------------------------------------------------------------------
# splitting

@dataclass
class SplitPlan:
    fold_count: int
    seed: int
    classes: list[str]
    # one dict per fold: item path -> "train" | "val" | "test"
    assignment: list[dict[str, str]]

    def paths(self, fold: int, bucket: str) -> list[str]:
        return sorted(p for p, b in self.assignment[fold].items() if b == bucket)

    def save(self, path) -> None:
        doc = {"fold_count": self.fold_count, "seed": self.seed,
               "classes": self.classes, "ratios": list(RATIOS),
               "assignment": self.assignment}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "SplitPlan":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return SplitPlan(fold_count=doc["fold_count"], seed=doc["seed"],
                         classes=doc["classes"], assignment=doc["assignment"])


def _allocate(n: int) -> list[int]:
    """Largest-remainder allocation of n into 70/20/10 buckets; each count
    lands within 1 of the exact quota."""
    quotas = [n * r for r in RATIOS]
    counts = [math.floor(q) for q in quotas]
    rem = n - sum(counts)
    order = sorted(range(len(RATIOS)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def split(m: DatasetManifest, folds: int = 5, seed: int = 0) -> SplitPlan:
    """Per-class stratified 70/20/10 partition per fold at origin-group
    granularity, so augmented descendants always follow their original."""
    if folds < 2:
        raise DataError(f"fold count must be >= 2, got {folds}", code="invalid-folds")
    by_class: dict[int, dict[str, list[DatasetItem]]] = {}
    for it in m.items:
        by_class.setdefault(it.class_index, {}).setdefault(it.group_key, []).append(it)
    for ci, groups in by_class.items():
        if len(groups) < folds:
            raise DataError(
                f"class {m.classes[ci]!r} has {len(groups)} source images; "
                f"need at least {folds}", code="class-too-small")

    assignment: list[dict[str, str]] = []
    for fold in range(folds):
        rng = np.random.default_rng([seed, fold])
        fold_map: dict[str, str] = {}
        for ci in sorted(by_class):
            keys = sorted(by_class[ci])
            perm = rng.permutation(len(keys))
            counts = _allocate(len(keys))
            cursor = 0
            for bucket, count in zip(BUCKETS, counts):
                for j in perm[cursor:cursor + count]:
                    for it in by_class[ci][keys[j]]:
                        fold_map[it.path] = bucket
                cursor += count
        assignment.append(fold_map)
    return SplitPlan(fold_count=folds, seed=seed, classes=list(m.classes),
                     assignment=assignment)


def check_no_leakage(plan: SplitPlan, m: DatasetManifest) -> None:
    """Raises if any augmented item is assigned a different bucket than its
    original in any fold."""
    for fold, fold_map in enumerate(plan.assignment):
        groups: dict[str, set[str]] = {}
        for it in m.items:
            groups.setdefault(it.group_key, set()).add(fold_map[it.path])
        for key, buckets in groups.items():
            if len(buckets) > 1:
                raise DataError(
                    f"fold {fold}: group {key!r} straddles {sorted(buckets)}",
                    code="split-leakage")
