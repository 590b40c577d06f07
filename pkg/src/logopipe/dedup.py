"""Duplicate detection: SSIM thresholding and feature-space retrieval.

Exact duplicates are flagged by structural similarity above 0.9, computed
on 8x8 non-overlapping blocks of a common 128x128 grayscale rendering.
Near-duplicate candidates are retrieved by exact 5-nearest-neighbor search
over the trained network's 64-d embeddings; the output is a review list,
not an automatic deletion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import resize_bilinear
from .network import extract_features

SSIM_SIZE = 128
SSIM_BLOCK = 8
SSIM_DYNAMIC_RANGE = 1.0
SSIM_C1 = (0.01 * SSIM_DYNAMIC_RANGE) ** 2
SSIM_C2 = (0.03 * SSIM_DYNAMIC_RANGE) ** 2
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
DUPLICATE_THRESHOLD = 0.9
NUM_NEIGHBORS = 5


@dataclass
class NeighborList:
    query: int
    neighbors: list[int]       # ids into set B, ascending distance
    distances: list[float]


def _to_gray_128(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img @ LUMA_WEIGHTS
    if img.shape != (SSIM_SIZE, SSIM_SIZE):
        img = resize_bilinear(img, SSIM_SIZE, SSIM_SIZE)
    return img


def _block_stats(gray: np.ndarray):
    b = SSIM_BLOCK
    n = SSIM_SIZE // b
    blocks = gray.reshape(n, b, n, b).transpose(0, 2, 1, 3).reshape(n, n, b * b)
    return blocks.mean(axis=2), blocks


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over non-overlapping 8x8 blocks.

    Inputs are any-size RGB or grayscale images with values in [0, 1];
    both are rendered to 128x128 grayscale first. Identical images score
    exactly 1; the measure is symmetric and bounded by 1 in magnitude.
    Block statistics use population (1/N) normalization.
    """
    ga = _to_gray_128(a)
    gb = _to_gray_128(b)
    mu_a, blocks_a = _block_stats(ga)
    mu_b, blocks_b = _block_stats(gb)
    da = blocks_a - mu_a[..., None]
    db = blocks_b - mu_b[..., None]
    var_a = (da * da).mean(axis=2)
    var_b = (db * db).mean(axis=2)
    cov = (da * db).mean(axis=2)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def find_exact_duplicates(set_a, set_b=None,
                          threshold: float = DUPLICATE_THRESHOLD):
    """All cross-set (or within-set when set_b is None/identical) pairs
    with ssim strictly above the threshold.

    Returns (index_a, index_b, score) triples; within-set mode reports
    each unordered pair once (i < j) and never a self-pair.
    """
    images_a = list(set_a)
    within = set_b is None or set_b is set_a
    images_b = images_a if within else list(set_b)
    pairs = []
    for i, img_a in enumerate(images_a):
        start = i + 1 if within else 0
        for j in range(start, len(images_b)):
            score = ssim(img_a, images_b[j])
            if score > threshold:
                pairs.append((i, j, score))
    return pairs


def find_near_duplicates(model, crops_a, crops_b=None,
                         k: int = NUM_NEIGHBORS) -> list[NeighborList]:
    """Exact k-nearest-neighbor retrieval over 64-d network embeddings.

    For every query crop in A, the k smallest-Euclidean-distance crops in
    B (all of B when it holds fewer than k). Within-set mode (crops_b is
    None or the same object) excludes the query itself. Ties order by id.
    """
    crops_a = list(crops_a)
    within = crops_b is None or crops_b is crops_a
    crops_b = crops_a if within else list(crops_b)
    if not crops_b:
        return [NeighborList(query=i, neighbors=[], distances=[])
                for i in range(len(crops_a))]
    feats_a = np.stack([extract_features(model, c) for c in crops_a])
    feats_b = (feats_a if within
               else np.stack([extract_features(model, c) for c in crops_b]))

    out = []
    for i in range(len(crops_a)):
        diff = feats_b - feats_a[i]
        dist = np.sqrt((diff * diff).sum(axis=1))
        ids = np.arange(len(crops_b))
        if within:
            keep = ids != i
            ids, dist = ids[keep], dist[keep]
        order = np.lexsort((ids, dist))[:k]
        out.append(NeighborList(query=i,
                                neighbors=[int(ids[j]) for j in order],
                                distances=[float(dist[j]) for j in order]))
    return out
