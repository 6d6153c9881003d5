"""Incident-anchored forensics: scrape payload collapse alignment, metric-family
disappearance and delta-ranked metric shifts around the incident time."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .catalog import IncidentRecord, day_start, format_ts
from .ingest import ColumnKey, NodeSeries, column_name

logger = logging.getLogger(__name__)

ALIGNMENT_HEADER = ["node", "t0Incident", "t0Used", "archive", "status"]
SUMMARY_HEADER = ["node", "t0", "category", "numSignalsLong", "rank", "metric", "delta", "diffStd"]
DISAPPEARANCE_HEADER = ["node", "t0", "metric", "labels", "class", "plane"]

MIN_LONG_SAMPLES = 3
PAYLOAD_DROP_RATIO = 0.5
PAYLOAD_MEDIAN_SCRAPES = 6


class AlignmentError(Exception):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class AlignmentResult:
    node: str
    t0_used: int
    last_good: int
    rule: str  # "gap" or "payloadDrop"
    payload_before: float
    payload_after: float
    scrape_interval: int = 600
    dropout: int = 3000
    method: str = "scrapeCountDrop"


def collapse_rule(
    timeline: np.ndarray, payload: np.ndarray, i: int, dropout: int = 3000,
    ratio: float = PAYLOAD_DROP_RATIO, median_scrapes: int = PAYLOAD_MEDIAN_SCRAPES,
) -> str | None:
    """Which collapse rule fires with scrape ``i`` as the last good one, if any.

    gap: the next observation comes more than ``dropout`` seconds later.
    payloadDrop: scrape ``i`` is at or above ``ratio`` x the median payload of the
    trailing ``median_scrapes`` scrapes (ending at ``i``), and every scrape from
    ``i + 1`` until at least ``dropout`` seconds later sits below that level.
    """
    n = len(timeline)
    if i + 1 >= n:
        return None
    if timeline[i + 1] - timeline[i] > dropout:
        return "gap"
    ref = float(np.median(payload[max(0, i - median_scrapes + 1): i + 1]))
    level = ratio * ref
    if ref <= 0 or payload[i] < level:
        return None
    until = timeline[i + 1] + dropout
    j = i + 1
    while j < n and timeline[j] < until:
        if payload[j] >= level:
            return None
        j += 1
    if j >= n:  # the low stretch is not observed for long enough
        return None
    return "payloadDrop" if payload[j] < level else None


def align_scrape_count_drop(
    series: NodeSeries, incident: IncidentRecord, scrape_interval: int = 600,
    dropout: int = 3000,
) -> AlignmentResult:
    """Earliest payload collapse inside the incident's collection window.

    ``t0_used = last_good + scrape_interval``; raises ``AlignmentError('noCollapse')``
    when nothing collapses inside the window.
    """
    if incident.refined_t0 is None:
        raise AlignmentError("unrefined", "incident has no refined time")
    lo, hi = incident.collect_start, incident.collect_end
    t = series.timeline
    payload = series.payload_counts()
    for i in np.flatnonzero((t >= lo) & (t <= hi)):
        t0 = int(t[i]) + scrape_interval
        if t0 > hi:
            break
        rule = collapse_rule(t, payload, int(i), dropout)
        if rule is None:
            continue
        ref = float(np.median(payload[max(0, i - PAYLOAD_MEDIAN_SCRAPES + 1): i + 1]))
        after = payload[i + 1: i + 1 + PAYLOAD_MEDIAN_SCRAPES]
        return AlignmentResult(
            series.node, t0, int(t[i]), rule, ref,
            float(np.median(after)) if after.size else 0.0, scrape_interval, dropout,
        )
    raise AlignmentError("noCollapse", f"{series.node}: no payload collapse in incident window")


def metric_plane(metric: str, labels=()) -> str:
    if metric.startswith("DCGM") or any(k == "gpu" for k, _ in labels):
        return "gpu"
    if metric.startswith("node_"):
        return "os"
    if metric.startswith("scrape_") or metric == "up":
        return "pipe"
    return "other"


@dataclass(frozen=True)
class DisappearanceReport:
    node: str
    t0: int
    classes: dict[str, str]  # metric name -> disappeared | partial | persistent
    disappeared_columns: tuple[ColumnKey, ...]
    partial_gpus: dict[str, tuple[str, ...]]  # metric -> gpu ids that vanished

    def families(self, cls: str) -> list[str]:
        return sorted(m for m, c in self.classes.items() if c == cls)

    @property
    def lost_gpus(self) -> tuple[str, ...]:
        ids = {dict(labels).get("gpu") for _m, labels in self.disappeared_columns}
        return tuple(sorted(i for i in ids if i is not None))

    def plane_status(self) -> dict[str, str]:
        """Per plane: 'disappeared' if every family vanished, 'persistent' if none did, else 'partial'."""
        per_plane: dict[str, set[str]] = defaultdict(set)
        for metric, cls in self.classes.items():
            per_plane[metric_plane(metric, ())].add(cls)
        out = {}
        for plane, classes in sorted(per_plane.items()):
            if classes == {"persistent"}:
                out[plane] = "persistent"
            elif classes == {"disappeared"}:
                out[plane] = "disappeared"
            else:
                out[plane] = "partial"
        return out


def detect_disappearance(
    series: NodeSeries, t0: int, post_horizon: int = 6000, min_long: int = MIN_LONG_SAMPLES
) -> DisappearanceReport:
    """Classify each metric family seen (>= ``min_long`` samples) before ``t0``.

    A column disappears when it has no sample in (t0, t0 + post_horizon]. A metric
    is ``disappeared`` when all its qualifying columns vanished, ``partial`` when
    only some did (e.g. a subset of GPUs), else ``persistent``.
    """
    t = series.timeline
    present = ~series.mask
    before = t < t0
    after = (t > t0) & (t <= t0 + post_horizon)
    vanished: dict[str, list[ColumnKey]] = defaultdict(list)
    seen: dict[str, list[ColumnKey]] = defaultdict(list)
    for j, key in enumerate(series.columns):
        if present[before, j].sum() < min_long:
            continue
        seen[key[0]].append(key)
        if not present[after, j].any():
            vanished[key[0]].append(key)
    classes, partial = {}, {}
    for metric in sorted(seen):
        gone = vanished.get(metric, [])
        if not gone:
            classes[metric] = "persistent"
        elif len(gone) == len(seen[metric]):
            classes[metric] = "disappeared"
        else:
            classes[metric] = "partial"
            partial[metric] = tuple(sorted(
                dict(labels).get("gpu", column_name((metric, labels))) for _m, labels in gone
            ))
    cols = tuple(k for metric in sorted(vanished) for k in vanished[metric])
    return DisappearanceReport(series.node, t0, classes, cols, partial)


@dataclass(frozen=True)
class Shift:
    key: ColumnKey
    delta: float
    diff_std: float
    mean_baseline: float
    mean_adjacent: float

    @property
    def name(self) -> str:
        return column_name(self.key)


@dataclass(frozen=True)
class ForensicSummary:
    node: str
    t0: int
    category: str
    num_signals_long: int
    shifts: tuple[Shift, ...]
    disappeared: tuple[ColumnKey, ...]
    side: str = "before"
    warnings: tuple[str, ...] = field(default=())


def rank_shifts(
    series: NodeSeries, t0: int, baseline_minutes: float = 30, adjacent_minutes: float = 5,
    side: str = "before", min_long: int = MIN_LONG_SAMPLES, category: str = "",
) -> ForensicSummary:
    """Mean/std change of every metric column between the baseline interval
    [t0 - 30 min, t0) and the short interval adjacent to t0, ranked by |delta|.

    ``side='before'`` uses (t0 - 5 min, t0]; ``side='after'`` uses [t0, t0 + 5 min].
    Columns with fewer than ``min_long`` baseline samples do not qualify; qualifying
    columns with no adjacent sample are reported as disappeared, not ranked.
    """
    if side not in ("before", "after"):
        raise ValueError("side must be 'before' or 'after'")
    t = series.timeline
    base = (t >= t0 - baseline_minutes * 60) & (t < t0)
    if side == "before":
        adj = (t > t0 - adjacent_minutes * 60) & (t <= t0)
    else:
        adj = (t >= t0) & (t <= t0 + adjacent_minutes * 60)
    shifts, gone = [], []
    qualifying = 0
    for j, key in enumerate(series.columns):
        col = series.values[:, j]
        b = col[base]
        b = b[~np.isnan(b)]
        if b.size < min_long:
            continue
        qualifying += 1
        a = col[adj]
        a = a[~np.isnan(a)]
        if a.size == 0:
            gone.append(key)
            continue
        shifts.append(Shift(
            key, float(a.mean() - b.mean()), float(a.std() - b.std()),
            float(b.mean()), float(a.mean()),
        ))
    shifts.sort(key=lambda s: (-abs(s.delta), s.name))
    notes = () if shifts else ("no qualifying metric in the comparison window",)
    if not shifts:
        logger.warning("%s: no rankable metric around %s", series.node, format_ts(t0))
    return ForensicSummary(series.node, t0, category, qualifying, tuple(shifts), tuple(gone),
                           side, notes)


@dataclass(frozen=True)
class IncidentForensics:
    incident: IncidentRecord
    archive: str
    alignment: AlignmentResult | None
    status: str
    summary: ForensicSummary | None = None
    disappearance: DisappearanceReport | None = None


def analyze_incident(
    series: NodeSeries | None, incident: IncidentRecord, archive: str = "",
    scrape_interval: int = 600, dropout: int = 3000, baseline_minutes: float = 30,
    adjacent_minutes: float = 5, side: str = "before",
) -> IncidentForensics:
    if incident.discarded or incident.refined_t0 is None:
        return IncidentForensics(incident, archive, None, "discarded")
    if series is None:
        return IncidentForensics(incident, archive, None, "missingArchive")
    try:
        al = align_scrape_count_drop(series, incident, scrape_interval, dropout)
    except AlignmentError as exc:
        return IncidentForensics(incident, archive, None, exc.code)
    summary = rank_shifts(series, al.t0_used, baseline_minutes, adjacent_minutes, side,
                          category=incident.category)
    gone = detect_disappearance(series, al.t0_used, post_horizon=2 * dropout)
    return IncidentForensics(incident, archive, al, "aligned", summary, gone)


def write_alignment(results: Iterable[IncidentForensics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALIGNMENT_HEADER)
        for r in results:
            w.writerow([
                r.incident.node, format_ts(day_start(r.incident.catalog_date)),
                format_ts(r.alignment.t0_used) if r.alignment else "", r.archive, r.status,
            ])


def write_summaries(results: Iterable[IncidentForensics], path: str | Path, top: int = 10) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in results:
            s = r.summary
            if s is None:
                continue
            for rank, shift in enumerate(s.shifts[:top], start=1):
                w.writerow([s.node, format_ts(s.t0), s.category, s.num_signals_long, rank,
                            shift.name, repr(shift.delta), repr(shift.diff_std)])


def write_disappearance(results: Iterable[IncidentForensics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISAPPEARANCE_HEADER)
        for r in results:
            d = r.disappearance
            if d is None:
                continue
            for metric, labels in d.disappeared_columns:
                w.writerow([d.node, format_ts(d.t0), metric,
                            ";".join(f"{k}={v}" for k, v in labels),
                            d.classes[metric], metric_plane(metric, labels)])
