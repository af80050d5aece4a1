"""Per-frame evaluation metrics: mAP, calibrated mAP, class-mean top-k recall.

All rankings are deterministic: equal scores are ordered by frame index
(for AP) or class index (for top-k), ascending.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this input (e.g. no positives)."""


@dataclass
class ScoredFrames:
    scores: np.ndarray  # (N, C+1)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or len(self.scores) != len(self.labels):
            raise ValueError("scores must be (N, C+1) with one label per row")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(self.labels < 0) or np.any(self.labels >= self.scores.shape[1]):
            raise ValueError("labels outside [0, C]")

    @classmethod
    def valid(cls, scores, labels) -> "ScoredFrames":
        """Drop frames whose label is negative (undefined future)."""
        labels = np.asarray(labels)
        keep = labels >= 0
        return cls(np.asarray(scores)[keep], labels[keep])


def _ranked_hits(scores: np.ndarray, positive: np.ndarray) -> np.ndarray:
    order = np.lexsort((np.arange(len(scores)), -scores))
    return positive[order]


def precision_curve(scores, positive, calibrate: bool = False) -> np.ndarray:
    """Precision (or calibrated precision) at every rank of the score ordering."""
    hits = _ranked_hits(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=bool))
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise UndefinedMetricError("no positives")
    if not calibrate:
        return tp / np.arange(1, len(hits) + 1)
    if n_pos == len(hits):
        return np.ones(len(hits))
    w = (len(hits) - n_pos) / n_pos
    return w * tp / (w * tp + fp)


def _average_precision(scores, positive, calibrate: bool) -> float:
    hits = _ranked_hits(scores, positive)
    prec = precision_curve(scores, positive, calibrate)
    return float(np.sum(prec[hits]) / hits.sum())


def _mean_ap(data: ScoredFrames, calibrate: bool) -> float:
    aps = []
    for c in range(1, data.scores.shape[1]):
        positive = data.labels == c
        if positive.any():
            aps.append(_average_precision(data.scores[:, c], positive, calibrate))
    if not aps:
        raise UndefinedMetricError("no non-background positives")
    return float(np.mean(aps))


def per_class_ap(data: ScoredFrames, calibrate: bool = False) -> dict[int, float]:
    out = {}
    for c in range(1, data.scores.shape[1]):
        positive = data.labels == c
        if positive.any():
            out[c] = _average_precision(data.scores[:, c], positive, calibrate)
    return out


def per_frame_map(data: ScoredFrames) -> float:
    """Mean over non-background classes with positives of per-frame AP."""
    return _mean_ap(data, calibrate=False)


def calibrated_map(data: ScoredFrames) -> float:
    """mAP with precision recalibrated by the class negative/positive ratio."""
    return _mean_ap(data, calibrate=True)


def class_mean_top5_recall(data: ScoredFrames, k: int = 5) -> float:
    if len(data.labels) == 0:
        raise UndefinedMetricError("no frames")
    n_cls = data.scores.shape[1]
    k = min(k, n_cls)
    # stable sort of negated scores keeps lower class indices first on ties
    top = np.argsort(-data.scores, axis=1, kind="stable")[:, :k]
    hit = np.any(top == data.labels[:, None], axis=1)
    recalls = [hit[data.labels == c].mean() for c in np.unique(data.labels)]
    return float(np.mean(recalls))


def accuracy(scores, labels) -> float:
    labels = np.asarray(labels)
    keep = labels >= 0
    if not keep.any():
        raise UndefinedMetricError("no labelled frames")
    return float(np.mean(np.argmax(np.asarray(scores)[keep], axis=1) == labels[keep]))
