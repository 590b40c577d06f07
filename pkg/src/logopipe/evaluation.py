"""Image-level precision/recall/F1/accuracy, ablation tables, and timing.

Metric semantics (detection reading, stated here because comparability
depends on it): an image-level decision counts as

  TP when a logo class is predicted and matches the image's logo label;
  FP when a logo class is predicted but the image is no-logo OR carries a
     different logo class (the wrong-class case also counts as FN);
  FN when NO-LOGO is predicted for a logo image, or the wrong class is.

Precision = TP/(TP+FP) and recall = TP/(TP+FN), each 0 when its
denominator is 0; F1 = 2PR/(P+R), 0 when P+R = 0. Accuracy is the
fraction of all images (logo and no-logo alike) decided exactly right.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import NO_LOGO, DatasetIndex
from .inference import classify_batch


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    confusion: np.ndarray      # (C+1) x (C+1), rows = truth, cols = decision
    class_names: list[str] = field(default_factory=list)


def evaluate(decisions, labels_by_path: dict, class_names) -> EvalResult:
    """Score decisions against image-level ground truth labels.

    decisions: iterable with .path and .predicted; labels_by_path maps
    each decision's path to its true label (a logo class or NO_LOGO).
    A decision whose path has no label raises KeyError.
    """
    class_names = list(class_names)
    index = {name: i for i, name in enumerate(class_names)}
    index[NO_LOGO] = len(class_names)
    n = len(class_names) + 1
    confusion = np.zeros((n, n), dtype=np.int64)

    tp = fp = fn = 0
    total = 0
    correct = 0
    for dec in decisions:
        if dec.path not in labels_by_path:
            raise KeyError(f"no ground-truth label for image {dec.path}")
        truth = labels_by_path[dec.path]
        pred = dec.predicted
        confusion[index[truth], index[pred]] += 1
        total += 1
        correct += pred == truth
        if pred != NO_LOGO:
            if truth == pred:
                tp += 1
            else:
                fp += 1
                if truth != NO_LOGO:
                    fn += 1
        elif truth != NO_LOGO:
            fn += 1

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = correct / total if total else 0.0
    return EvalResult(precision=precision, recall=recall, f1=f1,
                      accuracy=accuracy, tp=tp, fp=fp, fn=fn,
                      confusion=confusion, class_names=class_names)


def evaluate_model(model, dataset: DatasetIndex, proposer,
                   split: str = "test") -> EvalResult:
    """Classify a dataset split and score it."""
    records = dataset.records(split)
    labels = {r.path: r.label for r in records}
    decisions, _ = classify_batch([r.path for r in records], model, proposer)
    return evaluate(decisions, labels, dataset.class_names)


TOGGLE_HEADER = ("config", "bg-class", "bbs", "data-augm", "class-bal",
                 "contr-norm", "sample-weight")
METRIC_HEADER = ("precision", "recall", "f1", "accuracy")


def ablation_rows(results: dict) -> list[list[str]]:
    """Rows {preset -> (config, result)} formatted in table column order."""
    rows = []
    for name, (config, result) in results.items():
        bg, bbs, augm, balance, norm, weight = config.toggles()
        rows.append([
            name,
            "Yes" if bg else "No",
            bbs,
            "Yes" if augm else "No",
            balance.capitalize() if balance != "none" else "No",
            "Yes" if norm else "No",
            "Yes" if weight else "No",
            f"{result.precision:.3f}",
            f"{result.recall:.3f}",
            f"{result.f1:.3f}",
            f"{result.accuracy:.3f}",
        ])
    return rows


def ablation_table(preset_names, dataset: DatasetIndex, proposer,
                   seed: int = 0, split: str = "test", **config_overrides):
    """Train and evaluate each preset with a shared seed.

    Returns ({preset: (config, EvalResult)}, formatted text table).
    """
    from .training import preset, train

    results = {}
    for name in preset_names:
        config = preset(name, seed=seed, **config_overrides)
        model, _report = train(config, dataset, proposer)
        results[name] = (config, evaluate_model(model, dataset, proposer, split))
    header = list(TOGGLE_HEADER + METRIC_HEADER)
    return results, format_table(header, ablation_rows(results))


def format_table(header, rows) -> str:
    """Aligned plain-text table."""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(str(cell)))
    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def table_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


TIMING_HEADER = ("device", "proposal s", "preproc s", "classif s", "overall s")


def timing_report(model, paths, proposer, runs: int = 100,
                  device_label: str = "CPU"):
    """Average per-stage wall-clock seconds over repeated batch runs.

    Returns (mean StageTimings per image, formatted table). Stage times
    are averaged across runs and across the images of each run.
    """
    from .inference import StageTimings

    totals = StageTimings()
    paths = list(paths)
    n_images = max(len(paths), 1)
    for _ in range(runs):
        _, timings = classify_batch(paths, model, proposer)
        totals.add(timings)
    mean = totals.scaled(1.0 / (runs * n_images))
    row = [device_label, f"{mean.proposal:.2f}", f"{mean.preprocessing:.2f}",
           f"{mean.classification:.2f}", f"{mean.overall:.2f}"]
    return mean, format_table(list(TIMING_HEADER), [row])
