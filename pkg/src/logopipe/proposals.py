"""Recall-oriented candidate-region generation.

Two stages: a minimum-spanning-tree graph segmentation over the 8-connected
pixel grid (Euclidean RGB edge weights), then greedy hierarchical merging
of the most-similar adjacent regions. Every leaf region and every merge
contributes its bounding box, so the proposal set covers objects at all
scales the segmentation can see. Running the grouping over several
segmentation scales (k values) and unioning the boxes keeps recall high.

Everything here is deterministic: ties in edge weights resolve by edge
index, ties in similarity by the smaller (id, id) pair.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .data import BoundingBox

COLOR_BINS = 25
TEXTURE_BINS = 10


@dataclass
class SegmentationMap:
    width: int
    height: int
    labels: np.ndarray      # (H, W) int component ids in [0, count)
    count: int


@dataclass
class Region:
    """A candidate region tracked during grouping."""
    box: BoundingBox
    size: int
    color_hist: np.ndarray     # 75-d, L1-normalized
    texture_hist: np.ndarray   # 30-d, L1-normalized


@dataclass(frozen=True)
class ProposalConfig:
    k_values: tuple[float, ...] = (100.0, 200.0)
    min_size: int = 20
    max_proposals: int = 2000
    min_aspect: float = 1.0 / 8.0
    max_aspect: float = 8.0


@dataclass
class ProposalSet:
    """Deduplicated boxes, each with a grouping-order score in (0, 1]."""
    boxes: list[BoundingBox] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def add(self, box: BoundingBox, score: float):
        self.boxes.append(box)
        self.scores.append(score)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def _grid_edges(image: np.ndarray):
    """All 8-connected pixel edges with Euclidean RGB weights."""
    h, w = image.shape[:2]
    idx = np.arange(h * w).reshape(h, w)
    us, vs, ws = [], [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        y0 = slice(0, h - dy)
        y1 = slice(dy, h)
        if dx >= 0:
            x0 = slice(0, w - dx)
            x1 = slice(dx, w)
        else:
            x0 = slice(-dx, w)
            x1 = slice(0, w + dx)
        diff = image[y0, x0] - image[y1, x1]
        ws.append(np.sqrt((diff * diff).sum(axis=-1)).ravel())
        us.append(idx[y0, x0].ravel())
        vs.append(idx[y1, x1].ravel())
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ws)


def segment_graph(image: np.ndarray, k: float, min_size: int) -> SegmentationMap:
    """Felzenszwalb-style MST segmentation of an HxWx3 image in [0, 1].

    Components merge while the joining edge weight does not exceed either
    side's internal difference plus k / |component|; afterwards components
    smaller than min_size are merged into their nearest neighbor (smallest
    connecting edge weight first). Ids are contiguous in [0, count).

    Edge weights are Euclidean RGB distances on the 0..255 scale, the
    convention the usual k values (~50..500) were tuned for.
    """
    h, w = image.shape[:2]
    n = h * w
    if n == 1:
        return SegmentationMap(w, h, np.zeros((1, 1), dtype=np.intp), 1)
    us, vs, ws = _grid_edges(np.asarray(image, dtype=np.float64) * 255.0)
    order = np.argsort(ws, kind="stable")
    ul = us[order].tolist()
    vl = vs[order].tolist()
    wl = ws[order].tolist()

    parent = list(range(n))
    size = [1] * n
    internal = [0.0] * n

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for i in range(len(ul)):
        a = find(ul[i])
        b = find(vl[i])
        if a == b:
            continue
        wt = wl[i]
        if wt <= min(internal[a] + k / size[a], internal[b] + k / size[b]):
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            internal[a] = wt

    # absorb undersized components along the lightest edges first
    for i in range(len(ul)):
        a = find(ul[i])
        b = find(vl[i])
        if a != b and (size[a] < min_size or size[b] < min_size):
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.intp, count=n)
    _, labels = np.unique(roots, return_inverse=True)
    count = int(labels.max()) + 1
    return SegmentationMap(w, h, labels.reshape(h, w), count)


def _component_features(segmap: SegmentationMap, image: np.ndarray):
    """Per-component histograms, sizes and bounding boxes, vectorized."""
    h, w = segmap.height, segmap.width
    labels = segmap.labels.ravel()
    n = segmap.count
    img = np.asarray(image, dtype=np.float64)

    sizes = np.bincount(labels, minlength=n)

    # color: 25 bins per channel over [0, 1], concatenated then L1-normalized
    chans = img.reshape(-1, 3)
    bins = np.minimum((chans * COLOR_BINS).astype(np.intp), COLOR_BINS - 1)
    color = np.zeros((n, 3 * COLOR_BINS))
    for c in range(3):
        flat = labels * COLOR_BINS + bins[:, c]
        counts = np.bincount(flat, minlength=n * COLOR_BINS)
        color[:, c * COLOR_BINS:(c + 1) * COLOR_BINS] = \
            counts.reshape(n, COLOR_BINS)
    color /= np.maximum(color.sum(axis=1, keepdims=True), 1e-12)

    # texture: gradient orientation per channel, 10 bins over [0, 2*pi)
    gy, gx = np.gradient(img, axis=(0, 1))
    angle = np.arctan2(gy, gx)  # [-pi, pi]
    tbins = np.minimum(((angle + np.pi) / (2 * np.pi) * TEXTURE_BINS).astype(np.intp),
                       TEXTURE_BINS - 1).reshape(-1, 3)
    texture = np.zeros((n, 3 * TEXTURE_BINS))
    for c in range(3):
        flat = labels * TEXTURE_BINS + tbins[:, c]
        counts = np.bincount(flat, minlength=n * TEXTURE_BINS)
        texture[:, c * TEXTURE_BINS:(c + 1) * TEXTURE_BINS] = \
            counts.reshape(n, TEXTURE_BINS)
    texture /= np.maximum(texture.sum(axis=1, keepdims=True), 1e-12)

    ys, xs = np.divmod(np.arange(h * w), w)
    x0 = np.full(n, w, dtype=np.intp)
    y0 = np.full(n, h, dtype=np.intp)
    x1 = np.zeros(n, dtype=np.intp)
    y1 = np.zeros(n, dtype=np.intp)
    np.minimum.at(x0, labels, xs)
    np.minimum.at(y0, labels, ys)
    np.maximum.at(x1, labels, xs)
    np.maximum.at(y1, labels, ys)

    regions = []
    for i in range(n):
        box = BoundingBox(int(x0[i]), int(y0[i]),
                          int(x1[i] - x0[i] + 1), int(y1[i] - y0[i] + 1))
        regions.append(Region(box=box, size=int(sizes[i]),
                              color_hist=color[i], texture_hist=texture[i]))
    return regions


def _adjacency(segmap: SegmentationMap) -> set[tuple[int, int]]:
    lab = segmap.labels
    pairs = set()
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        h, w = lab.shape
        y0 = slice(0, h - dy)
        y1 = slice(dy, h)
        if dx >= 0:
            x0, x1 = slice(0, w - dx), slice(dx, w)
        else:
            x0, x1 = slice(-dx, w), slice(0, w + dx)
        a = lab[y0, x0].ravel()
        b = lab[y1, x1].ravel()
        m = a != b
        lo = np.minimum(a[m], b[m])
        hi = np.maximum(a[m], b[m])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _similarity(a: Region, b: Region, image_area: int) -> float:
    """Equal-weight sum of color, texture, size and fill similarities."""
    s_color = np.minimum(a.color_hist, b.color_hist).sum()
    s_texture = np.minimum(a.texture_hist, b.texture_hist).sum()
    s_size = 1.0 - (a.size + b.size) / image_area
    bb_w = (max(a.box.x + a.box.w, b.box.x + b.box.w)
            - min(a.box.x, b.box.x))
    bb_h = (max(a.box.y + a.box.h, b.box.y + b.box.h)
            - min(a.box.y, b.box.y))
    s_fill = 1.0 - (bb_w * bb_h - a.size - b.size) / image_area
    return float(s_color + s_texture + s_size + s_fill)


def _merge(a: Region, b: Region) -> Region:
    total = a.size + b.size
    color = (a.color_hist * a.size + b.color_hist * b.size) / total
    texture = (a.texture_hist * a.size + b.texture_hist * b.size) / total
    x0 = min(a.box.x, b.box.x)
    y0 = min(a.box.y, b.box.y)
    x1 = max(a.box.x + a.box.w, b.box.x + b.box.w)
    y1 = max(a.box.y + a.box.h, b.box.y + b.box.h)
    return Region(box=BoundingBox(x0, y0, x1 - x0, y1 - y0), size=total,
                  color_hist=color, texture_hist=texture)


def group_regions(segmap: SegmentationMap, image: np.ndarray) -> ProposalSet:
    """Greedily merge the most-similar adjacent regions down to one.

    Every region ever formed (leaves included) contributes its bounding
    box; scores increase with creation order so the final whole-image
    region scores 1. Ties in similarity resolve toward the smaller region
    id pair.
    """
    regions = {i: r for i, r in enumerate(_component_features(segmap, image))}
    image_area = segmap.width * segmap.height
    adjacency = _adjacency(segmap)
    neighbors: dict[int, set[int]] = {i: set() for i in regions}
    for a, b in adjacency:
        neighbors[a].add(b)
        neighbors[b].add(a)

    n_leaves = len(regions)
    total_regions = 2 * n_leaves - 1 if n_leaves else 0
    out = ProposalSet()
    for i in range(n_leaves):
        out.add(regions[i].box, (i + 1) / total_regions)

    # (negated similarity, id pair) heap; stale entries are skipped lazily
    heap = []
    for a, b in sorted(adjacency):
        heapq.heappush(heap, (-_similarity(regions[a], regions[b], image_area), a, b))

    next_id = n_leaves
    alive = set(regions)
    while len(alive) > 1 and heap:
        neg_sim, a, b = heapq.heappop(heap)
        if a not in alive or b not in alive:
            continue
        merged = _merge(regions[a], regions[b])
        regions[next_id] = merged
        alive.discard(a)
        alive.discard(b)
        alive.add(next_id)
        merged_nb = (neighbors[a] | neighbors[b]) - {a, b}
        merged_nb &= alive
        neighbors[next_id] = set()
        for nb in sorted(merged_nb):
            neighbors[next_id].add(nb)
            neighbors[nb].add(next_id)
            neighbors[nb].discard(a)
            neighbors[nb].discard(b)
            heapq.heappush(heap, (-_similarity(merged, regions[nb], image_area),
                                  nb, next_id))
        out.add(merged.box, (next_id + 1) / total_regions)
        next_id += 1
    return out


def propose(image: np.ndarray, config: ProposalConfig = ProposalConfig()) -> ProposalSet:
    """Union of grouped proposals over every k, deduplicated and filtered.

    Duplicate boxes keep their highest score. Boxes with area below
    min_size or aspect ratio outside [min_aspect, max_aspect] are dropped;
    the survivors are truncated to max_proposals by descending score.
    """
    img = np.asarray(image, dtype=np.float64)
    best: dict[tuple, float] = {}
    order: dict[tuple, int] = {}
    seen = 0
    for k in config.k_values:
        segmap = segment_graph(img, k, config.min_size)
        grouped = group_regions(segmap, img)
        for box, score in zip(grouped.boxes, grouped.scores):
            key = (box.x, box.y, box.w, box.h)
            if key not in best:
                best[key] = score
                order[key] = seen
                seen += 1
            elif score > best[key]:
                best[key] = score

    kept = []
    for key, score in best.items():
        x, y, w, h = key
        if w * h < config.min_size:
            continue
        aspect = w / h
        if aspect < config.min_aspect or aspect > config.max_aspect:
            continue
        kept.append((key, score))
    kept.sort(key=lambda item: (-item[1], order[item[0]]))
    kept = kept[:config.max_proposals]

    out = ProposalSet()
    for (x, y, w, h), score in kept:
        out.add(BoundingBox(x, y, w, h), score)
    return out


class ProposalGenerator:
    """propose() plus a by-key cache.

    Proposals depend only on the image and the config, so pipelines that
    revisit the same images (training-set construction, threshold
    calibration, evaluation) share one generator and pay for each image
    once. Pass key=path when calling with a loaded array.
    """

    def __init__(self, config: ProposalConfig = ProposalConfig()):
        self.config = config
        self._cache: dict[str, ProposalSet] = {}

    def __call__(self, image: np.ndarray, key: str | None = None) -> ProposalSet:
        if key is not None and key in self._cache:
            return self._cache[key]
        result = propose(image, self.config)
        if key is not None:
            self._cache[key] = result
        return result
