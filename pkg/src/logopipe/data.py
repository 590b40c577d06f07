"""Dataset layout, bounding boxes, labeling, crops, and class balancing.

On-disk layout (FlickrLogos-32 style):

    <root>/<split>/<class>/<image>            split in {train, val, test}
    <root>/<split>/<class>/<image>.bboxes.txt sidecar, one per logo image

A sidecar starts with the header line ``x y width height`` followed by one
integer quadruple per logo instance (top-left corner plus extents, in
pixels). Images under a ``no-logo`` class directory carry no sidecar. The
class table is the lexicographically sorted set of logo class directories;
the background/no-logo label is always the last index.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

NO_LOGO = "no-logo"
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SIDECAR_SUFFIX = ".bboxes.txt"
SIDECAR_HEADER = "x y width height"

CROP_SIZE = 32
IOU_POSITIVE = 0.5
STD_FLOOR = 1e-6


class DatasetError(Exception):
    """Raised for unreadable images or malformed annotation files."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle: integer top-left corner and extents."""
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def clipped(self, width: int, height: int) -> "BoundingBox | None":
        """Intersection with the image rectangle; None if fully outside."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_name: str


@dataclass
class ImageRecord:
    path: str
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def label(self) -> str:
        """Image-level ground truth: the logo class, or no-logo."""
        return self.annotations[0].class_name if self.annotations else NO_LOGO


@dataclass
class DatasetIndex:
    root: str
    splits: dict[str, list[ImageRecord]]
    class_names: list[str]

    def records(self, *split_names: str) -> list[ImageRecord]:
        out = []
        for name in split_names:
            out.extend(self.splits.get(name, []))
        return out

    def label_index(self, class_name: str) -> int:
        """Class index; the background/no-logo index is len(class_names)."""
        if class_name == NO_LOGO:
            return len(self.class_names)
        return self.class_names.index(class_name)


# Sample origins
ORIGIN_GT = "GT"
ORIGIN_OP = "OP"
ORIGIN_OP_BACKGROUND = "OP-background"
ORIGIN_AUGMENTED = "augmented"


@dataclass
class LabeledSample:
    """One training example: a 32x32x3 crop plus labeling metadata."""
    crop: np.ndarray
    label: int            # class index; background = num logo classes
    iou: float
    weight: float
    origin: str


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation over all training pixels."""
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def label_proposals(proposals, annotations,
                    iou_positive: float = IOU_POSITIVE):
    """Assign each proposal a class by its best-overlap annotation.

    Returns (box, class_name, best_iou) triples where class_name is None
    for background. Rules: best IoU >= iou_positive -> the annotation's
    class; zero overlap with every annotation -> background; anything in
    between is excluded (dropped from the output). Ties between equally
    overlapping annotations go to the earlier annotation.
    """
    out = []
    for box in proposals:
        best_iou = 0.0
        best_cls = None
        for ann in annotations:
            v = iou(box, ann.box)
            if v > best_iou:
                best_iou, best_cls = v, ann.class_name
        if best_iou >= iou_positive:
            out.append((box, best_cls, best_iou))
        elif best_iou == 0.0:
            out.append((box, None, 0.0))
        # 0 < best_iou < iou_positive: neither positive nor background
    return out


def crop_resize(image: np.ndarray, box: BoundingBox,
                size: int = CROP_SIZE) -> np.ndarray:
    """Crop a box out of an HxWx3 image and bilinearly resize to size^2.

    The box is clipped to the image first; a box fully outside raises.
    Corner-aligned bilinear sampling: output corners equal source corners.
    Input values are expected (and returned) in [0, 1].
    """
    h, w = image.shape[:2]
    clipped = box.clipped(w, h)
    if clipped is None:
        raise ValueError(f"box {box} lies fully outside the {w}x{h} image")
    patch = image[clipped.y:clipped.y + clipped.h,
                  clipped.x:clipped.x + clipped.w]
    return resize_bilinear(patch, size, size)


def resize_bilinear(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an HxW or HxWxC array."""
    in_h, in_w = patch.shape[:2]
    ys = (np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1
          else np.zeros(1))
    xs = (np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1
          else np.zeros(1))
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    if patch.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    p00 = patch[np.ix_(y0, x0)]
    p01 = patch[np.ix_(y0, x1)]
    p10 = patch[np.ix_(y1, x0)]
    p11 = patch[np.ix_(y1, x1)]
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


def augment_shifts(box: BoundingBox, image_extents: tuple[int, int],
                   n: int, max_shift: int, rng_seed) -> list[BoundingBox]:
    """n copies of the box, each translated by uniform integer offsets.

    Offsets are drawn independently per axis from [-max_shift, +max_shift];
    the shifted box is clamped so it stays inside the image (preserving
    its extent where possible). Deterministic per seed.
    """
    width, height = image_extents
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(n):
        dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
        nx = int(np.clip(box.x + dx, 0, max(width - box.w, 0)))
        ny = int(np.clip(box.y + dy, 0, max(height - box.h, 0)))
        shifted = BoundingBox(nx, ny, min(box.w, width), min(box.h, height))
        out.append(shifted)
    return out


def compute_norm_stats(crops) -> NormStats:
    """Per-channel mean/std over every pixel of every crop.

    Standard deviations are clamped below at 1e-6 so constant channels
    normalize to zero rather than dividing by zero.
    """
    stacked = np.stack(list(crops))
    flat = stacked.reshape(-1, stacked.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return NormStats(mean=tuple(float(v) for v in mean),
                     std=tuple(float(v) for v in std))


def apply_norm(crop: np.ndarray, stats: NormStats) -> np.ndarray:
    return (crop - np.asarray(stats.mean)) / np.asarray(stats.std)


def balance_epoch(samples_by_class: dict, rng_seed) -> list:
    """Pad every class to the majority count by resampling, then shuffle.

    Deterministic per seed; classes are visited in sorted key order so the
    output is independent of dict insertion order.
    """
    rng = np.random.default_rng(rng_seed)
    counts = {k: len(v) for k, v in samples_by_class.items() if v}
    if not counts:
        return []
    target = max(counts.values())
    out = []
    for key in sorted(counts):
        group = samples_by_class[key]
        out.extend(group)
        deficit = target - len(group)
        if deficit:
            picks = rng.integers(0, len(group), size=deficit)
            out.extend(group[i] for i in picks)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def balance_batch(samples, batch_size: int, rng_seed,
                  key=lambda s: s.label):
    """Yield batches whose per-class counts differ by at most one.

    The epoch is first balanced (every class padded to the majority count),
    then dealt into batches class by class: each batch takes
    floor(batch_size / C) samples of every class plus one extra for
    batch_size mod C rotating classes. Deterministic per seed.
    """
    rng = np.random.default_rng(rng_seed)
    groups: dict = {}
    for s in samples:
        groups.setdefault(key(s), []).append(s)
    if not groups:
        return
    classes = sorted(groups)
    c = len(classes)
    target = max(len(g) for g in groups.values())
    queues = []
    for name in classes:
        group = groups[name]
        deficit = target - len(group)
        padded = list(group)
        if deficit:
            picks = rng.integers(0, len(group), size=deficit)
            padded.extend(group[i] for i in picks)
        order = rng.permutation(len(padded))
        queues.append([padded[i] for i in order])

    total = target * c
    n_batches = (total + batch_size - 1) // batch_size
    cursor = [0] * c
    rotate = 0
    emitted = 0
    for _ in range(n_batches):
        take = min(batch_size, total - emitted)
        b_base, b_extra = divmod(take, c)
        batch = []
        for j in range(c):
            want = b_base + (1 if (j - rotate) % c < b_extra else 0)
            q = queues[j]
            for _ in range(want):
                if cursor[j] >= len(q):
                    # refill by resampling the class (keeps batches full)
                    refill = rng.integers(0, len(q), size=len(q))
                    q.extend(q[i] for i in refill)
                batch.append(q[cursor[j]])
                cursor[j] += 1
        rotate = (rotate + b_extra) % c
        emitted += take
        order = rng.permutation(len(batch))
        yield [batch[i] for i in order]


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read an image file as HxWx3 float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def save_image(arr: np.ndarray, path) -> None:
    """Write an HxWx3 float array in [0, 1] as an 8-bit image file."""
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def _read_sidecar(path) -> list[BoundingBox]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != SIDECAR_HEADER:
        raise DatasetError(f"{path}: expected header line {SIDECAR_HEADER!r}")
    boxes = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}: malformed annotation line {ln!r}")
        try:
            x, y, w, h = (int(p) for p in parts)
        except ValueError as exc:
            raise DatasetError(f"{path}: non-integer annotation {ln!r}") from exc
        boxes.append(BoundingBox(x, y, w, h))
    return boxes


def write_sidecar(path, boxes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SIDECAR_HEADER + "\n")
        for b in boxes:
            fh.write(f"{b.x} {b.y} {b.w} {b.h}\n")


def load_dataset(root) -> DatasetIndex:
    """Index the on-disk layout under root.

    Annotations reaching past the image edge are clipped with a warning.
    A logo-class image without a sidecar, or an unreadable image, raises
    DatasetError. An empty or missing root yields an empty index.
    """
    root = Path(root)
    splits: dict[str, list[ImageRecord]] = {}
    class_dirs = set()
    for split in SPLITS:
        split_dir = root / split
        records: list[ImageRecord] = []
        if split_dir.is_dir():
            for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                cls = class_dir.name
                if cls != NO_LOGO:
                    class_dirs.add(cls)
                for img_path in sorted(class_dir.iterdir()):
                    if img_path.suffix.lower() not in IMAGE_EXTENSIONS:
                        continue
                    records.append(_index_image(img_path, cls))
        splits[split] = records
    return DatasetIndex(root=str(root), splits=splits,
                        class_names=sorted(class_dirs))


def _index_image(img_path: Path, cls: str) -> ImageRecord:
    try:
        with Image.open(img_path) as im:
            width, height = im.size
    except OSError as exc:
        raise DatasetError(f"unreadable image {img_path}: {exc}") from exc
    annotations: list[Annotation] = []
    if cls != NO_LOGO:
        sidecar = Path(str(img_path) + SIDECAR_SUFFIX)
        if not sidecar.exists():
            raise DatasetError(
                f"{img_path}: logo image is missing its {SIDECAR_SUFFIX} sidecar")
        for box in _read_sidecar(sidecar):
            clipped = box.clipped(width, height)
            if clipped is None:
                raise DatasetError(
                    f"{sidecar}: box {box} lies fully outside the image")
            if clipped != box:
                warnings.warn(
                    f"{sidecar}: box {box} extends past the {width}x{height} "
                    f"image edge; clipped to {clipped}")
                box = clipped
            annotations.append(Annotation(box=box, class_name=cls))
    return ImageRecord(path=str(img_path), annotations=annotations)
