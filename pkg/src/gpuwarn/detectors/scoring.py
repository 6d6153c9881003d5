"""Score series, trailing smoothing, robust-z scoring and budgeted thresholding."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from ..features import RobustScaler, WindowFeatureMatrix, fit_robust_scaler, max_abs_z

logger = logging.getLogger(__name__)

SCORE_HEADER = ["node", "windowStart", "detector", "plane", "rawScore", "smoothScore", "alert"]


@dataclass(frozen=True)
class ScoreSeries:
    """Per-window scores of one (detector, plane); rows ordered by node then window."""

    detector: str
    plane: str
    nodes: np.ndarray
    window_index: np.ndarray
    window_start: np.ndarray
    raw: np.ndarray
    smooth: np.ndarray | None = None
    alert: np.ndarray | None = None
    threshold: float | None = None
    budget: float | None = None
    warnings: tuple[str, ...] = ()

    @classmethod
    def from_matrix(cls, detector: str, plane: str, matrix: WindowFeatureMatrix, raw) -> "ScoreSeries":
        return cls(detector, plane, matrix.nodes, matrix.window_index, matrix.window_start,
                   np.asarray(raw, dtype=float))

    def node_slices(self) -> list[tuple[str, slice]]:
        out = []
        start = 0
        n = len(self.nodes)
        for i in range(1, n + 1):
            if i == n or self.nodes[i] != self.nodes[start]:
                out.append((self.nodes[start], slice(start, i)))
                start = i
        return out

    @property
    def alert_fraction(self) -> float:
        if self.alert is None or self.smooth is None:
            return float("nan")
        present = ~np.isnan(self.smooth)
        return float(self.alert[present].sum() / present.sum()) if present.any() else float("nan")


def trailing_mean(x: np.ndarray, window: int = 5) -> np.ndarray:
    """Mean of present values over indices [i - window + 1, i]; shorter at the start."""
    x = np.asarray(x, dtype=float)
    present = ~np.isnan(x)
    csum = np.concatenate([[0.0], np.cumsum(np.where(present, x, 0.0))])
    ccnt = np.concatenate([[0], np.cumsum(present)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - window + 1, 0)
    total = csum[idx + 1] - csum[lo]
    count = ccnt[idx + 1] - ccnt[lo]
    out = np.full(len(x), np.nan)
    ok = count > 0
    out[ok] = total[ok] / count[ok]
    return out


def smooth_scores(scores: ScoreSeries, window: int = 5) -> ScoreSeries:
    """Trailing rolling mean within each node; never crosses node boundaries."""
    smooth = np.full(len(scores.raw), np.nan)
    for _node, rows in scores.node_slices():
        smooth[rows] = trailing_mean(scores.raw[rows], window)
    return replace(scores, smooth=smooth)


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank q-quantile: the ceil(q * N)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return float("nan")
    k = math.ceil(round(q * v.size, 9))
    return float(v[min(max(k, 1), v.size) - 1])


def apply_budget(scores: ScoreSeries, budget: float = 0.01, per_node: bool = False) -> ScoreSeries:
    """Threshold at the nearest-rank (1 - budget) quantile of present smoothed scores;
    alert where the smoothed score is strictly above it."""
    if not 0 < budget < 1:
        raise ValueError("budget must lie in (0, 1)")
    if scores.smooth is None:
        scores = smooth_scores(scores)
    smooth = scores.smooth
    alert = np.zeros(len(smooth), dtype=bool)
    notes = list(scores.warnings)
    groups = scores.node_slices() if per_node else [("*", slice(0, len(smooth)))]
    thresholds = []
    for node, rows in groups:
        s = smooth[rows]
        present = ~np.isnan(s)
        if not present.any():
            thresholds.append(float("nan"))
            continue
        thr = nearest_rank(s[present], 1.0 - budget)
        thresholds.append(thr)
        alert[rows] = present & (np.where(present, s, -np.inf) > thr)
        if np.all(s[present] == s[present][0]):
            msg = f"all scores identical for {scores.detector}/{scores.plane} ({node}); no alerts"
            logger.warning(msg)
            notes.append(msg)
    threshold = thresholds[0] if not per_node else float(np.nanmax(thresholds)) if thresholds else math.nan
    return replace(scores, alert=alert, threshold=threshold, budget=budget, warnings=tuple(notes))


def score_robust_z(matrix: WindowFeatureMatrix, scaler: RobustScaler) -> ScoreSeries:
    """max |robust z| over present features; windows with nothing present stay missing."""
    z = scaler.transform(matrix.values)
    return ScoreSeries.from_matrix("z-score", "", matrix, max_abs_z(z))


def fit_scaler_for(matrix: WindowFeatureMatrix, train_rows=None) -> RobustScaler:
    return fit_robust_scaler(matrix.values, train_rows, matrix.names)


def write_scores(series: Iterable[ScoreSeries], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for s in series:
            for i in range(len(s.raw)):
                w.writerow([
                    s.nodes[i], int(s.window_start[i]), s.detector, s.plane,
                    _fmt(s.raw[i]), _fmt(s.smooth[i]) if s.smooth is not None else "",
                    int(s.alert[i]) if s.alert is not None else "",
                ])


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))
