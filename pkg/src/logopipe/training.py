"""Training-set construction, the training loop, and threshold calibration.

A TrainingConfig bundles the six training-choice toggles ablated in the
experiments (background class, GT vs GT+OP boxes, shift augmentation,
class balancing, contrast normalization, sample weighting) with the
optimizer hyperparameters. The named presets TC-I .. TC-X fix the toggle
combinations; hyperparameters stay at their defaults unless overridden.

Training positives always include the ground-truth crops of the train and
val splits. With GT+OP boxes, region proposals on those images that
overlap an annotation with IoU >= 0.5 join as positives; with the
background class enabled, zero-overlap proposals join as background
examples. Sample weights equal a positive's IoU when sample weighting is
on, 1 otherwise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dm
from .data import (ORIGIN_AUGMENTED, ORIGIN_GT, ORIGIN_OP,
                   ORIGIN_OP_BACKGROUND, DatasetIndex, LabeledSample)
from .network import LogoNet, backward_batch, build_network, forward_batch
from .ops import sgd_step, weighted_cross_entropy_batch

BBS_GT = "GT"
BBS_GT_OP = "GT+OP"
BALANCE_MODES = ("none", "epoch", "batch")


@dataclass(frozen=True)
class TrainingConfig:
    bg_class: bool = True
    bbs: str = BBS_GT_OP
    data_augm: bool = True
    class_balance: str = "epoch"       # none | epoch | batch
    contrast_norm: bool = True
    sample_weight: bool = False
    # optimizer hyperparameters (defaults; every field is overridable)
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    # dataset-building knobs
    augment_copies: int = 5
    augment_max_shift: int = 4
    max_op_positives_per_image: int = 4
    max_backgrounds_per_image: int = 3

    def __post_init__(self):
        if self.bbs not in (BBS_GT, BBS_GT_OP):
            raise ValueError(f"bbs must be {BBS_GT!r} or {BBS_GT_OP!r}")
        if self.class_balance not in BALANCE_MODES:
            raise ValueError(f"class_balance must be one of {BALANCE_MODES}")

    def toggles(self) -> tuple:
        return (self.bg_class, self.bbs, self.data_augm, self.class_balance,
                self.contrast_norm, self.sample_weight)


# The ten ablation presets: (bg_class, bbs, data_augm, class_balance,
# contrast_norm, sample_weight) per configuration row.
PRESET_TOGGLES = {
    "TC-I":    (False, BBS_GT,    False, "none",  False, False),
    "TC-II":   (True,  BBS_GT,    False, "none",  False, False),
    "TC-III":  (True,  BBS_GT_OP, False, "none",  False, False),
    "TC-IV":   (True,  BBS_GT_OP, True,  "none",  False, False),
    "TC-V":    (True,  BBS_GT_OP, True,  "epoch", False, False),
    "TC-VI":   (True,  BBS_GT_OP, True,  "batch", False, False),
    "TC-VII":  (True,  BBS_GT_OP, True,  "epoch", True,  False),
    "TC-VIII": (True,  BBS_GT_OP, True,  "epoch", True,  True),
    "TC-IX":   (True,  BBS_GT_OP, True,  "batch", True,  False),
    "TC-X":    (True,  BBS_GT_OP, True,  "batch", True,  True),
}

PRESET_NAMES = tuple(PRESET_TOGGLES)


def preset(name: str, **overrides) -> TrainingConfig:
    """A TrainingConfig for one of the named TC presets."""
    if name not in PRESET_TOGGLES:
        raise KeyError(f"unknown preset {name!r}; valid: {', '.join(PRESET_NAMES)}")
    bg, bbs, augm, balance, norm, weight = PRESET_TOGGLES[name]
    cfg = TrainingConfig(bg_class=bg, bbs=bbs, data_augm=augm,
                         class_balance=balance, contrast_norm=norm,
                         sample_weight=weight)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracies: list[float] = field(default_factory=list)
    threshold: float = 0.0
    counts_by_origin: dict = field(default_factory=dict)
    counts_by_class: dict = field(default_factory=dict)
    train_seconds: float = 0.0

    def lines(self) -> list[str]:
        out = []
        for i, (loss, acc) in enumerate(zip(self.epoch_losses,
                                            self.epoch_accuracies), 1):
            out.append(f"epoch {i} loss {loss:.6f} acc {acc:.4f}")
        for origin in sorted(self.counts_by_origin):
            out.append(f"samples {origin} {self.counts_by_origin[origin]}")
        for cls in sorted(self.counts_by_class):
            out.append(f"class {cls} {self.counts_by_class[cls]}")
        out.append(f"threshold {self.threshold!r}")
        out.append(f"train-seconds {self.train_seconds:.2f}")
        return out


def build_training_set(config: TrainingConfig, dataset: DatasetIndex,
                       proposer=None) -> list[LabeledSample]:
    """Assemble LabeledSamples from the train and val splits.

    The proposer (image, key -> ProposalSet) is required whenever the
    config needs proposal-derived examples, i.e. with GT+OP boxes or with
    the background class enabled; background examples are by definition
    proposal regions that overlap no annotation.
    """
    needs_proposer = config.bg_class or config.bbs == BBS_GT_OP
    if needs_proposer and proposer is None:
        raise ValueError(
            "this configuration needs a proposal generator: background "
            "examples and OP positives are both defined from proposals")

    n_logo = len(dataset.class_names)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    samples: list[LabeledSample] = []

    for record in dataset.records("train", "val"):
        image = dm.load_image(record.path)
        height, width = image.shape[:2]
        positive_boxes: list[tuple] = []   # (box, class index, iou)

        for ann in record.annotations:
            positive_boxes.append((ann.box, dataset.label_index(ann.class_name), 1.0))
            samples.append(LabeledSample(
                crop=dm.crop_resize(image, ann.box),
                label=dataset.label_index(ann.class_name),
                iou=1.0, weight=1.0, origin=ORIGIN_GT))

        if needs_proposer:
            props = proposer(image, key=record.path)
            labeled = dm.label_proposals(props.boxes, record.annotations)
            op_pos = [(b, c, v) for b, c, v in labeled if c is not None]
            op_bg = [b for b, c, v in labeled if c is None]

            if config.bbs == BBS_GT_OP:
                op_pos.sort(key=lambda t: -t[2])
                for box, cls, v in op_pos[:config.max_op_positives_per_image]:
                    idx = dataset.label_index(cls)
                    positive_boxes.append((box, idx, v))
                    samples.append(LabeledSample(
                        crop=dm.crop_resize(image, box), label=idx, iou=v,
                        weight=v if config.sample_weight else 1.0,
                        origin=ORIGIN_OP))

            if config.bg_class and op_bg:
                take = min(config.max_backgrounds_per_image, len(op_bg))
                picks = rng.choice(len(op_bg), size=take, replace=False)
                for i in sorted(picks):
                    samples.append(LabeledSample(
                        crop=dm.crop_resize(image, op_bg[i]), label=n_logo,
                        iou=0.0, weight=1.0, origin=ORIGIN_OP_BACKGROUND))

        if config.data_augm and positive_boxes:
            for box, idx, _ in positive_boxes:
                shift_seed = rng.integers(0, 2 ** 63)
                for shifted in dm.augment_shifts(
                        box, (width, height), config.augment_copies,
                        config.augment_max_shift, shift_seed):
                    best = max((dm.iou(shifted, ann.box)
                                for ann in record.annotations), default=0.0)
                    samples.append(LabeledSample(
                        crop=dm.crop_resize(image, shifted), label=idx,
                        iou=best,
                        weight=best if config.sample_weight else 1.0,
                        origin=ORIGIN_AUGMENTED))
    return samples


def train(config: TrainingConfig, dataset: DatasetIndex, proposer=None,
          calibrate: bool = True):
    """Train a network under the config; returns (model, report).

    Mini-batch momentum SGD over the built training set, shuffled per
    epoch; the learning rate decays by 10x at two thirds of the epochs.
    Deterministic for a fixed config and single-threaded execution. When
    calibrate is true the decision threshold is fitted on the train+val
    images afterwards.
    """
    t0 = time.perf_counter()
    samples = build_training_set(config, dataset, proposer)
    if not samples:
        raise ValueError("training set is empty; check the dataset splits")

    if config.contrast_norm:
        stats = dm.compute_norm_stats([s.crop for s in samples])
    else:
        stats = None

    num_outputs = len(dataset.class_names) + (1 if config.bg_class else 0)
    net = build_network(num_classes=num_outputs, seed=config.seed)
    net.class_names = list(dataset.class_names)
    net.has_background = config.bg_class
    if stats is not None:
        net.norm_mean = np.asarray(stats.mean)
        net.norm_std = np.asarray(stats.std)

    crops = np.stack([s.crop for s in samples])
    if stats is not None:
        crops = dm.apply_norm(crops, stats)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    weights = np.array([s.weight for s in samples])

    report = TrainReport()
    report.counts_by_origin = _count_by(samples, lambda s: s.origin)
    report.counts_by_class = _count_by(samples, lambda s: s.label)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 23]))
    decay_epoch = max(int(config.epochs * 2 / 3), 1)
    idx_by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        idx_by_label.setdefault(int(lab), []).append(i)

    for epoch in range(config.epochs):
        lr = config.lr * (0.1 if epoch >= decay_epoch else 1.0)
        epoch_seed = rng.integers(0, 2 ** 63)

        if config.class_balance == "epoch":
            order = dm.balance_epoch(idx_by_label, epoch_seed)
            batches = [order[i:i + config.batch_size]
                       for i in range(0, len(order), config.batch_size)]
        elif config.class_balance == "batch":
            batches = list(dm.balance_batch(
                list(range(len(samples))), config.batch_size, epoch_seed,
                key=lambda i: int(labels[i])))
        else:
            order = np.random.default_rng(epoch_seed).permutation(len(samples))
            batches = [order[i:i + config.batch_size].tolist()
                       for i in range(0, len(order), config.batch_size)]

        total_loss = 0.0
        total_correct = 0
        total_seen = 0
        for batch_idx in batches:
            idx = np.asarray(batch_idx, dtype=np.intp)
            xb = crops[idx]
            yb = labels[idx]
            wb = weights[idx]
            probs, caches = forward_batch(net, xb, train=True)
            loss, grad = weighted_cross_entropy_batch(probs, yb, wb)
            backward_batch(net, caches, grad)
            sgd_step(net.params, lr, config.momentum)
            total_loss += loss * len(idx)
            total_correct += int((probs.argmax(axis=1) == yb).sum())
            total_seen += len(idx)
        report.epoch_losses.append(total_loss / total_seen)
        report.epoch_accuracies.append(total_correct / total_seen)

    if calibrate:
        calib = dataset.records("train", "val")
        net.threshold = calibrate_threshold(net, calib, proposer)
    report.threshold = net.threshold
    report.train_seconds = time.perf_counter() - t0
    return net, report


def _count_by(samples, key):
    out: dict = {}
    for s in samples:
        k = key(s)
        out[k] = out.get(k, 0) + 1
    return out


def calibrate_threshold(model: LogoNet, calibration_records, proposer) -> float:
    """Smallest threshold maximizing image-level accuracy.

    Candidates are 0 plus every observed winning max-pooled logo
    confidence; the decision rule (strict >, background wins immediately)
    is the same one inference applies.
    """
    from .inference import pooled_scores

    if not calibration_records:
        raise ValueError("calibration set is empty")
    outcomes = []   # (true label, winner class or None for background, conf)
    candidates = {0.0}
    for record in calibration_records:
        image = dm.load_image(record.path)
        winner, conf = pooled_scores(model, image, proposer, key=record.path)
        outcomes.append((record.label, winner, conf))
        if winner is not None:
            candidates.add(conf)

    best_t = 0.0
    best_acc = -1.0
    for t in sorted(candidates):
        correct = 0
        for true_label, winner, conf in outcomes:
            if winner is not None and conf > t:
                decided = winner
            else:
                decided = dm.NO_LOGO
            correct += decided == true_label
        acc = correct / len(outcomes)
        if acc > best_acc:
            best_acc = acc
            best_t = t
    return float(best_t)
