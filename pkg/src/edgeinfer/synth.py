"""Synthetic two-class image generator for desk-scale runs.

Class "clear": skin-toned background with mild texture noise.
Class "lesion": the same background plus several reddish elliptical blotches.
Sorted class order puts "lesion" at index 1, i.e. the positive class for the
binary head.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, ingest

CLASSES = ("clear", "lesion")


def _base_skin(rng: np.random.Generator, size: int) -> np.ndarray:
    # luminance varies per image; chroma offsets stay tight so the red shift
    # of a lesion is not drowned by tone variation
    lum = rng.uniform(150, 200)
    tone = np.array([lum + rng.uniform(38, 48), lum, lum - rng.uniform(20, 30)])
    img = np.tile(tone, (size, size, 1))
    img += rng.normal(0.0, 6.0, size=(size, size, 3))
    # gentle illumination gradient, equal across channels
    ramp = np.linspace(-1.0, 1.0, size)
    img += rng.uniform(-12, 12) * ramp[:, None, None]
    img += rng.uniform(-12, 12) * ramp[None, :, None]
    return img


def _add_lesions(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    n_spots = int(rng.integers(5, 9))
    for _ in range(n_spots):
        cy, cx = rng.uniform(5, size - 5, size=2)
        ry, rx = rng.uniform(2.8, 5.0, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        d2 = (u / ry) ** 2 + (v / rx) ** 2
        mask = np.clip(1.5 - d2, 0.0, 1.0)  # soft-edged ellipse
        shift = np.array([rng.uniform(30, 50), rng.uniform(-55, -35), rng.uniform(-45, -25)])
        img = img + mask[:, :, None] * shift
    return img


def synth_image(label: str, seed: int, size: int = 32) -> Image.Image:
    rng = np.random.default_rng(seed)
    img = _base_skin(rng, size)
    if label == "lesion":
        img = _add_lesions(img, rng)
    return Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), mode="RGB")


def generate_synthetic(root, per_class: int = 250, seed: int = 0,
                       size: int = 32) -> DatasetManifest:
    """Writes per_class PNGs for each class under root and ingests them."""
    root = Path(root)
    for ci, label in enumerate(CLASSES):
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = synth_image(label, seed=seed * 1_000_000 + ci * 100_000 + i, size=size)
            img.save(d / f"{label}_{i:04d}.png", format="PNG")
    return ingest(root)
