"""Colored-shape image folders for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ((220, 40, 40), (40, 80, 220), (40, 180, 60), (230, 200, 30))


def draw_shape(kind: str, color, size: int, rng: np.random.Generator) -> Image.Image:
    noise = rng.integers(90, 140, size=(size, size, 3), dtype=np.uint8)
    img = Image.fromarray(noise, "RGB")
    d = ImageDraw.Draw(img)
    r = rng.uniform(0.2, 0.3) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    box = [cx - r, cy - r, cx + r, cy + r]
    if kind == "circle":
        d.ellipse(box, fill=color)
    elif kind == "square":
        d.rectangle(box, fill=color)
    elif kind == "triangle":
        d.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    else:
        w = r / 3
        d.rectangle([cx - r, cy - w, cx + r, cy + w], fill=color)
        d.rectangle([cx - w, cy - r, cx + w, cy + r], fill=color)
    return img


def make_shapes_dataset(root, num_classes: int = 2, per_class: int = 20, size: int = 32,
                        seed: int = 0) -> Path:
    """Write ``<root>/<shape>/<nnn>.png``; one shape and color per class."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        folder = root / SHAPES[c]
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            draw_shape(SHAPES[c], COLORS[c], size, rng).save(folder / f"{i:03d}.png")
    return root
