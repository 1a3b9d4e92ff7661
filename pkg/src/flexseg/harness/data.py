"""Synthetic misaligned scenes: coloured rectangles and discs on a background.

The image is rendered from the true shape geometry; the training mask is
rendered from a jittered copy of every shape (integer shift plus a size
change of up to ``jitter`` pixels), mimicking generated images whose content
drifts away from the conditioning mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from ..tensor_io import read_tensor, seeded_rng, write_tensor

MANIFEST = "manifest.json"


@dataclass
class Shape:
    kind: str  # "rect" or "disc"
    label: int
    cy: int
    cx: int
    size: int  # disc radius or rectangle half-height
    aspect: float = 1.0  # rectangle half-width = size * aspect

    def moved(self, dy: int, dx: int, dsize: int) -> "Shape":
        return Shape(self.kind, self.label, self.cy + dy, self.cx + dx,
                     max(1, self.size + dsize), self.aspect)


def render_shape(shape: Shape, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if shape.kind == "disc":
        return (yy - shape.cy) ** 2 + (xx - shape.cx) ** 2 <= shape.size ** 2
    hw = max(1, int(round(shape.size * shape.aspect)))
    return (np.abs(yy - shape.cy) <= shape.size) & (np.abs(xx - shape.cx) <= hw)


def paint(shapes: List[Shape], h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.int32)
    for s in shapes:
        mask[render_shape(s, h, w)] = s.label
    return mask


@dataclass
class SyntheticScene:
    image: np.ndarray  # [H, W, 3] float64
    true_mask: np.ndarray  # [H, W] int32
    train_mask: np.ndarray  # [H, W] int32
    jitter: int

    @property
    def agreement(self) -> float:
        return float(np.mean(self.true_mask == self.train_mask))


def class_palette(n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Base colours, kept at least 0.35 apart so classes stay separable."""
    colours = [rng.uniform(0.0, 1.0, 3)]
    while len(colours) < n_classes:
        c = rng.uniform(0.0, 1.0, 3)
        if min(np.linalg.norm(c - o) for o in colours) >= 0.35:
            colours.append(c)
    return np.array(colours)


def jitter_shapes(shapes: List[Shape], jitter: int, rng: np.random.Generator) -> List[Shape]:
    if jitter == 0:
        return list(shapes)
    out = []
    for s in shapes:
        dy, dx, ds = rng.integers(-jitter, jitter + 1, size=3)
        out.append(s.moved(int(dy), int(dx), int(ds)))
    return out


def make_scene(h: int, w: int, n_classes: int, jitter: int, palette: np.ndarray,
               rng: np.random.Generator, style: float = 0.08, noise: float = 0.04) -> SyntheticScene:
    n_shapes = int(rng.integers(2, 5))
    shapes = []
    for _ in range(n_shapes):
        size = int(rng.integers(max(2, min(h, w) // 10), max(3, min(h, w) // 4) + 1))
        shapes.append(Shape(
            kind="disc" if rng.random() < 0.5 else "rect",
            label=int(rng.integers(1, n_classes)),
            cy=int(rng.integers(0, h)),
            cx=int(rng.integers(0, w)),
            size=size,
            aspect=float(rng.uniform(0.6, 1.6)),
        ))
    true_mask = paint(shapes, h, w)
    train_mask = paint(jitter_shapes(shapes, jitter, rng), h, w)

    # per-scene colour shift ("style") plus per-pixel noise
    shift = rng.normal(0.0, style, size=3)
    image = palette[true_mask] + shift + rng.normal(0.0, noise, size=(h, w, 3))
    return SyntheticScene(image, true_mask, train_mask, jitter)


def make_scenes(n_scenes: int, h: int = 32, w: int = 32, n_classes: int = 4,
                jitter: int = 2, seed: int = 0) -> List[SyntheticScene]:
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    rng = seeded_rng(seed)
    palette = class_palette(n_classes, rng)
    return [make_scene(h, w, n_classes, jitter, palette, rng) for _ in range(n_scenes)]


def gen_dataset(n_scenes: int, h: int, w: int, n_classes: int, jitter: int, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = make_scenes(n_scenes, h, w, n_classes, jitter, seed)
    entries = []
    for i, sc in enumerate(scenes):
        stem = f"scene_{i:04d}"
        write_tensor(sc.image, out / f"{stem}.image.npy")
        write_tensor(sc.true_mask, out / f"{stem}.true_mask.npy")
        write_tensor(sc.train_mask, out / f"{stem}.train_mask.npy")
        entries.append({"stem": stem, "agreement": sc.agreement})
    manifest = {"n_scenes": n_scenes, "height": h, "width": w, "num_classes": n_classes,
                "jitter": jitter, "seed": seed, "scenes": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(path):
    """Return ``(images, train_masks, true_masks, manifest)`` as stacked arrays."""
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    stems = [e["stem"] for e in manifest["scenes"]]
    images = np.stack([read_tensor(root / f"{s}.image.npy") for s in stems]).astype(np.float64)
    train = np.stack([read_tensor(root / f"{s}.train_mask.npy") for s in stems])
    true = np.stack([read_tensor(root / f"{s}.true_mask.npy") for s in stems])
    return images, train, true, manifest
