"""Image/video prediction, confusion matrices and the average-accuracy metric."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import spnet
from .data import DatasetManifest, load_frame_sequence, load_image
from .errors import ConfigurationError, DataError
from .pyramid import RasterImage, preprocess


def argmax_lowest(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(scores))


def image_scores(state, spec: spnet.NetworkSpec, mean_image, images: Sequence[RasterImage],
                 chunk: int = 64) -> np.ndarray:
    """Softmax score rows for a list of images (inference mode)."""
    rows = []
    for start in range(0, len(images), chunk):
        parts = [preprocess(img, mean_image, spec.pyramid_levels, spec.input_scale)
                 for img in images[start:start + chunk]]
        batch = [np.stack(p) for p in zip(*parts)]
        rows.append(spnet.predict_proba(state, spec, batch))
    return np.concatenate(rows)


def predict_image(state, spec, mean_image, image: RasterImage) -> tuple[np.ndarray, int]:
    scores = image_scores(state, spec, mean_image, [image])[0]
    return scores, argmax_lowest(scores)


def predict_video(state, spec, mean_image, frames: Sequence[RasterImage],
                  aggregate: str = "mean") -> tuple[np.ndarray, int]:
    """Classify a frame sequence.

    ``aggregate="mean"`` averages the per-frame score vectors before the
    argmax. ``"vote"`` takes a majority vote of per-frame argmaxes and
    returns the vote fractions as the score vector.

    Frames are scored one at a time, exactly as :func:`predict_image` does,
    so a video of one repeated frame reproduces the image result bit for bit.
    """
    if not frames:
        raise DataError("video has no frames")
    per_frame = image_scores(state, spec, mean_image, list(frames), chunk=1)
    if aggregate == "mean":
        # shifted mean: exact when every frame scores the same
        scores = per_frame[0] + (per_frame - per_frame[0]).mean(axis=0)
    elif aggregate == "vote":
        votes = np.bincount(per_frame.argmax(axis=1), minlength=per_frame.shape[1])
        scores = votes / votes.sum()
    else:
        raise ConfigurationError(f"unknown video aggregation {aggregate!r}")
    return scores, argmax_lowest(scores)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows actual, columns predicted

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def row_normalized(self) -> np.ndarray:
        """Percentages per actual class; rows without samples are NaN."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sums > 0, 100.0 * self.counts / sums, np.nan)

    @property
    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.counts.sum(axis=1) == 0)]


def confusion_matrix(pairs, k: int) -> ConfusionMatrix:
    counts = np.zeros((k, k), dtype=np.int64)
    for i, (actual, predicted) in enumerate(pairs):
        if not (0 <= actual < k and 0 <= predicted < k):
            raise DataError(f"pair {i}: ({actual}, {predicted}) outside [0, {k})")
        counts[actual, predicted] += 1
    return ConfusionMatrix(counts)


def average_accuracy(cm) -> float:
    """Mean per-class recall, in percent.

    Accepts a :class:`ConfusionMatrix` or an already row-normalised
    percentage matrix (as printed in a report).
    """
    if isinstance(cm, ConfusionMatrix):
        if cm.empty_rows:
            raise DataError(f"classes without samples: {cm.empty_rows}")
        table = cm.row_normalized
    else:
        table = np.asarray(cm, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise DataError(f"expected a square matrix, got shape {table.shape}")
    return float(np.mean(np.diag(table)))


@dataclass
class SampleResult:
    path: str
    actual: int
    predicted: int
    score_true: float
    score_pred: float


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    average_accuracy: float
    samples: list


def evaluate(state, spec, mean_image, manifest: DatasetManifest, role: str = "test",
             video_aggregate: str = "mean", image_loader=load_image,
             frame_loader=load_frame_sequence) -> Evaluation:
    entries = manifest.select(role)
    if not entries:
        raise DataError(f"{role} split is empty")
    results = []
    for e in entries:
        path = manifest.resolve(e)
        try:
            if e.kind == "video":
                scores, pred = predict_video(
                    state, spec, mean_image, frame_loader(path), video_aggregate)
            else:
                scores, pred = predict_image(state, spec, mean_image, image_loader(path))
        except DataError as exc:
            raise DataError(f"evaluation failed on {e.path}: {exc}") from exc
        results.append(SampleResult(e.path, e.label, pred,
                                    float(scores[e.label]), float(scores[pred])))
    cm = confusion_matrix([(r.actual, r.predicted) for r in results], len(manifest.class_names))
    return Evaluation(cm, average_accuracy(cm), results)


def write_sample_log(samples, class_names, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "actual", "predicted", "score_true", "score_pred"])
        for s in samples:
            w.writerow([s.path, class_names[s.actual], class_names[s.predicted],
                        f"{s.score_true:.6f}", f"{s.score_pred:.6f}"])


def _write_table(path, class_names, rows, fmt):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actual"] + list(class_names))
        for name, row in zip(class_names, rows):
            w.writerow([name] + [fmt(v) for v in row])


def emit_report(cm: ConfusionMatrix, avg_acc: float, out_dir, class_names=None) -> dict:
    """Write ``confusion_counts.csv``, ``confusion_rownorm.csv`` and ``summary.txt``."""
    names = list(class_names) if class_names else [str(i) for i in range(cm.k)]
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "counts": os.path.join(out_dir, "confusion_counts.csv"),
        "rownorm": os.path.join(out_dir, "confusion_rownorm.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
    }
    _write_table(paths["counts"], names, cm.counts, str)
    _write_table(paths["rownorm"], names, cm.row_normalized,
                 lambda v: "nan" if np.isnan(v) else f"{v:.1f}")
    with open(paths["summary"], "w") as fh:
        fh.write(f"average_accuracy={avg_acc:.2f}\n")
    return paths


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Parse a confusion CSV written by :func:`emit_report`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, values
