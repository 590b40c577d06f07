"""Deterministic synthetic-logo benchmark generator.

Each class is a distinct (shape, color) glyph rasterized at a random
position and scale onto a textured background; backgrounds mix
low-frequency color noise with occasional distractor shapes drawn in
non-class colors. Images land on disk in the standard dataset layout
(PNG plus bounding-box sidecars) so the rest of the pipeline consumes
them like any other dataset.

Every image is a pure function of (seed, split, index): the per-image RNG
stream is derived from that triple, so datasets regenerate bytewise
identically and images may be produced in any order.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (NO_LOGO, BoundingBox, DatasetIndex, load_dataset,
                   save_image, write_sidecar)

# saturated class hues, far from the muted background palette
CLASS_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.80),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.50, 0.15, 0.75),
}

SHAPES = ("disc", "ring", "tri", "square", "diamond", "cross", "star", "checker")

# muted palette for the low-frequency background texture
BACKGROUND_PALETTE = np.array([
    (0.45, 0.42, 0.38),
    (0.55, 0.52, 0.48),
    (0.35, 0.38, 0.42),
    (0.60, 0.58, 0.52),
    (0.42, 0.48, 0.40),
])

DISTRACTOR_COLORS = np.array([
    (0.92, 0.92, 0.92),
    (0.12, 0.12, 0.12),
    (0.50, 0.50, 0.50),
    (0.45, 0.30, 0.20),
])


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    train_per_class: int = 25
    val_per_class: int = 10
    test_per_class: int = 30
    no_logo_train: int = 40
    no_logo_val: int = 20
    no_logo_test: int = 30
    image_size: int = 128
    min_logo_frac: float = 0.15
    max_logo_frac: float = 0.40
    noise_level: float = 0.03
    max_distractors: int = 3
    seed: int = 0

    def __post_init__(self):
        limit = len(SHAPES) * len(CLASS_COLORS)
        if not 2 <= self.num_classes <= limit:
            raise ValueError(f"num_classes must be in [2, {limit}]")

    @property
    def class_names(self) -> list[str]:
        names = []
        colors = list(CLASS_COLORS)
        for i in range(self.num_classes):
            shape = SHAPES[i % len(SHAPES)]
            color = colors[(i + i // len(SHAPES)) % len(colors)]
            names.append(f"{shape}-{color}")
        return sorted(names)

    def counts(self, split: str) -> tuple[int, int]:
        """(per-class logo images, no-logo images) for a split."""
        return {
            "train": (self.train_per_class, self.no_logo_train),
            "val": (self.val_per_class, self.no_logo_val),
            "test": (self.test_per_class, self.no_logo_test),
        }[split]


def _image_rng(spec: SynthSpec, split: str, class_name: str, index: int):
    token = f"{split}/{class_name}/{index}".encode()
    entropy = [spec.seed] + list(token)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean raster of the glyph silhouette on a size x size grid."""
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size]
    dx, dy = x - c, y - c
    r = size / 2.0
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "tri":
        # upward triangle: full width at the base, apex at the top
        frac = (y + 0.5) / size
        return np.abs(dx) <= frac * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "cross":
        arm = size / 6.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "star":
        # astroid-like four-pointed star, connected through the center
        u = np.abs(dx) / r
        v = np.abs(dy) / r
        return u ** 0.6 + v ** 0.6 <= 1.0
    if shape == "checker":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def _glyph_pattern(shape: str, color: np.ndarray, size: int,
                   rng) -> np.ndarray:
    """Per-pixel glyph colors: the class hue with mild shading."""
    shade = np.linspace(0.88, 1.12, size).reshape(-1, 1, 1)
    pattern = np.clip(color.reshape(1, 1, 3) * shade, 0.02, 0.98)
    pattern = np.broadcast_to(pattern, (size, size, 3)).copy()
    if shape == "checker":
        y, x = np.mgrid[0:size, 0:size]
        cell = max(size // 4, 1)
        dark = ((x // cell + y // cell) % 2) == 1
        pattern[dark] *= 0.8
    return pattern


def render_background(rng, spec: SynthSpec) -> np.ndarray:
    """Low-frequency color texture, pixel noise, and distractor shapes."""
    s = spec.image_size
    cells = 8
    palette_idx = rng.integers(0, len(BACKGROUND_PALETTE), size=(cells, cells))
    coarse = BACKGROUND_PALETTE[palette_idx]
    coarse = coarse + rng.normal(0.0, 0.04, size=coarse.shape)
    # bilinear upsample of the coarse grid
    from .data import resize_bilinear
    bg = resize_bilinear(coarse, s, s)
    bg = bg + rng.normal(0.0, spec.noise_level, size=bg.shape)
    bg = np.clip(bg, 0.0, 1.0)

    for _ in range(int(rng.integers(0, spec.max_distractors + 1))):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        dsize = int(rng.integers(max(s // 10, 4), max(s // 4, 6)))
        mask = _shape_mask(shape, dsize)
        color = DISTRACTOR_COLORS[int(rng.integers(0, len(DISTRACTOR_COLORS)))]
        color = np.clip(color + rng.normal(0.0, 0.03, size=3), 0.05, 0.95)
        x0 = int(rng.integers(0, s - dsize + 1))
        y0 = int(rng.integers(0, s - dsize + 1))
        region = bg[y0:y0 + dsize, x0:x0 + dsize]
        region[mask] = color
    return bg


def render_image(spec: SynthSpec, split: str, class_name: str, index: int):
    """One benchmark image; returns (image, tight_box_or_None).

    Deterministic in (spec.seed, split, class_name, index). For no-logo
    images the box is None. The glyph is composited last, so its rendered
    pixels are exactly those that differ from the background render under
    the same RNG stream.
    """
    rng = _image_rng(spec, split, class_name, index)
    bg = render_background(rng, spec)
    if class_name == NO_LOGO:
        return bg, None

    shape, color_name = class_name.split("-")
    base = np.array(CLASS_COLORS[color_name])
    jitter = rng.uniform(-0.06, 0.06, size=3)
    color = np.clip(base + jitter, 0.02, 0.98)

    s = spec.image_size
    frac = rng.uniform(spec.min_logo_frac, spec.max_logo_frac)
    gsize = max(int(round(frac * s)), 8)
    mask = _shape_mask(shape, gsize)
    pattern = _glyph_pattern(shape, color, gsize, rng)

    x0 = int(rng.integers(0, s - gsize + 1))
    y0 = int(rng.integers(0, s - gsize + 1))
    image = bg.copy()
    region = image[y0:y0 + gsize, x0:x0 + gsize]
    region[mask] = pattern[mask]

    ys, xs = np.nonzero(mask)
    box = BoundingBox(x0 + int(xs.min()), y0 + int(ys.min()),
                      int(xs.max() - xs.min()) + 1,
                      int(ys.max() - ys.min()) + 1)
    return image, box


def generate(spec: SynthSpec, root) -> DatasetIndex:
    """Write the dataset under root and return its index."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc

    for split in ("train", "val", "test"):
        per_class, no_logo_count = spec.counts(split)
        for cls in spec.class_names:
            cls_dir = root / split / cls
            cls_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                image, box = render_image(spec, split, cls, i)
                img_path = cls_dir / f"synth_{i:04d}.png"
                save_image(image, img_path)
                write_sidecar(str(img_path) + ".bboxes.txt", [box])
        nl_dir = root / split / NO_LOGO
        nl_dir.mkdir(parents=True, exist_ok=True)
        for i in range(no_logo_count):
            image, _ = render_image(spec, split, NO_LOGO, i)
            save_image(image, nl_dir / f"synth_{i:04d}.png")
    return load_dataset(root)
