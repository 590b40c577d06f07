"""Test-time pipeline: propose, normalize, classify, pool, decide.

Per image: region proposals are cropped to 32x32, contrast-normalized when
the model was trained that way, and classified; the per-proposal class
probabilities are max-pooled into one score vector. The winning class
(background included, when the model has one) decides the image: a
background win or a winning confidence not above the threshold means
NO-LOGO, anything else assigns the winner's logo class.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as dm
from .data import NO_LOGO
from .network import LogoNet, forward_batch

INFER_BATCH = 256


@dataclass
class ImageDecision:
    path: str
    predicted: str               # class name or NO_LOGO
    confidence: float            # pooled score of the winning class
    pooled: np.ndarray | None    # per-class max-pooled vector
    proposal_count: int
    error: str | None = None


@dataclass
class StageTimings:
    proposal: float = 0.0
    preprocessing: float = 0.0
    classification: float = 0.0
    overall: float = 0.0

    def add(self, other: "StageTimings"):
        self.proposal += other.proposal
        self.preprocessing += other.preprocessing
        self.classification += other.classification
        self.overall += other.overall

    def scaled(self, factor: float) -> "StageTimings":
        return StageTimings(self.proposal * factor,
                            self.preprocessing * factor,
                            self.classification * factor,
                            self.overall * factor)


def pool_proposal_probs(probs: np.ndarray) -> np.ndarray:
    """Elementwise max over proposal rows: (N, C) -> (C,)."""
    return probs.max(axis=0)


def decide(pooled: np.ndarray | None, model: LogoNet) -> tuple[str, float]:
    """Apply the decision rule to a pooled score vector.

    Background winning (ties included) is NO-LOGO regardless of the
    threshold; a logo winner must exceed the threshold strictly.
    """
    if pooled is None or pooled.size == 0:
        return NO_LOGO, 0.0
    n_logo = len(model.class_names)
    logo_scores = pooled[:n_logo]
    best_logo = int(logo_scores.argmax())
    conf = float(logo_scores[best_logo])
    if model.has_background and float(pooled[n_logo]) >= conf:
        return NO_LOGO, float(pooled[n_logo])
    if conf > model.threshold:
        return model.class_names[best_logo], conf
    return NO_LOGO, conf


def pooled_scores(model: LogoNet, image: np.ndarray, proposer,
                  key: str | None = None):
    """(winner class or None, winner confidence) before thresholding.

    None means the background class won (or there were no proposals);
    threshold calibration uses this to enumerate its candidate cutoffs.
    """
    pooled, _count, _t = _pooled_vector(model, image, proposer, key)
    if pooled is None:
        return None, 0.0
    n_logo = len(model.class_names)
    best_logo = int(pooled[:n_logo].argmax())
    conf = float(pooled[best_logo])
    if model.has_background and float(pooled[n_logo]) >= conf:
        return None, conf
    return model.class_names[best_logo], conf


def _pooled_vector(model: LogoNet, image: np.ndarray, proposer,
                   key: str | None = None):
    timings = StageTimings()
    t0 = time.perf_counter()
    props = proposer(image, key=key) if key is not None else proposer(image)
    timings.proposal = time.perf_counter() - t0

    if len(props) == 0:
        return None, 0, timings

    t0 = time.perf_counter()
    crops = np.stack([dm.crop_resize(image, box) for box in props.boxes])
    if model.norm_mean is not None:
        crops = (crops - model.norm_mean) / model.norm_std
    timings.preprocessing = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows = []
    for start in range(0, len(crops), INFER_BATCH):
        rows.append(forward_batch(model, crops[start:start + INFER_BATCH]))
    probs = np.concatenate(rows, axis=0)
    pooled = pool_proposal_probs(probs)
    timings.classification = time.perf_counter() - t0
    return pooled, len(crops), timings


def classify_image(image: np.ndarray, model: LogoNet, proposer,
                   path: str = "") -> ImageDecision:
    """Classify one loaded image; zero proposals yield NO-LOGO at 0."""
    pooled, count, _ = _pooled_vector(model, image, proposer,
                                      key=path or None)
    predicted, conf = decide(pooled, model)
    return ImageDecision(path=path, predicted=predicted, confidence=conf,
                         pooled=pooled, proposal_count=count)


def classify_batch(paths, model: LogoNet, proposer):
    """Classify image files; returns (decisions, per-stage timings).

    Decisions match per-image classify_image calls. An unreadable image
    produces a decision carrying an error message; the batch continues.
    Timings accumulate wall-clock seconds over the whole batch.
    """
    decisions: list[ImageDecision] = []
    totals = StageTimings()
    t_start = time.perf_counter()
    for path in paths:
        try:
            image = dm.load_image(path)
        except dm.DatasetError as exc:
            decisions.append(ImageDecision(
                path=str(path), predicted=NO_LOGO, confidence=0.0,
                pooled=None, proposal_count=0, error=str(exc)))
            continue
        pooled, count, timings = _pooled_vector(model, image, proposer,
                                                key=str(path))
        predicted, conf = decide(pooled, model)
        decisions.append(ImageDecision(path=str(path), predicted=predicted,
                                       confidence=conf, pooled=pooled,
                                       proposal_count=count))
        totals.add(timings)
    totals.overall = time.perf_counter() - t_start
    return decisions, totals
