"""Weak events from the scalar signature, lead times and alert-run statistics."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detectors import DISPLAY_NAMES, ScoreSeries, nearest_rank
from .features import AvailabilityMatrix, SignatureMatrix

REPORT_HEADER = ["plane", "method", "avgLead", "medianLead", "maxLead", "avgRunLen", "runs"]
EVENTS_HEADER = ["node", "startWindow", "startTime", "length", "lead", "detector", "plane"]
PLANE_DISPLAY = {"gpu": "GPU", "pipe": "Pipe", "os": "OS", "joint": "Joint"}


@dataclass(frozen=True)
class WeakEvent:
    node: str
    start_window: int
    end_window: int
    start_time: int
    peak: float
    threshold: float

    @property
    def length(self) -> int:
        return self.end_window - self.start_window + 1


def true_runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """(start, end) inclusive positions of maximal runs of True."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return []
    padded = np.concatenate(([0], flags.astype(np.int8), [0]))
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def extract_weak_events(
    signature: SignatureMatrix, q: float = 0.99, min_run: int = 3, pooled: bool = False
) -> list[WeakEvent]:
    """Maximal runs of at least ``min_run`` windows with signature strictly above its
    nearest-rank q-quantile (per node unless ``pooled``). Missing windows break runs."""
    s = signature.scalar
    pooled_thr = None
    if pooled:
        present = s[~np.isnan(s)]
        pooled_thr = nearest_rank(present, q) if present.size else np.nan
    events = []
    for node, rows in signature.node_slices():
        x = s[rows]
        present = ~np.isnan(x)
        if not present.any():
            continue
        thr = pooled_thr if pooled else nearest_rank(x[present], q)
        above = present & (np.where(present, x, -np.inf) > thr)
        idx = signature.window_index[rows]
        starts = signature.window_start[rows]
        for a, b in true_runs(above):
            if b - a + 1 >= min_run:
                events.append(WeakEvent(
                    str(node), int(idx[a]), int(idx[b]), int(starts[a]),
                    float(np.max(x[a:b + 1])), float(thr),
                ))
    return events


@dataclass(frozen=True)
class LeadStats:
    leads: tuple[int, ...]
    detected: tuple[bool, ...]
    mode: str
    avg: float | None
    median: float | None
    max: float | None

    @property
    def no_events(self) -> bool:
        return len(self.leads) == 0


def event_leads(
    events: Sequence[WeakEvent], alerts: ScoreSeries, lookback: int = 48
) -> list[tuple[int, bool]]:
    """Per event: (lead, detected). Lead is start - earliest alert in
    [start - lookback, start]; 0 and not detected when no alert falls there."""
    if alerts.alert is None:
        raise ValueError("scores carry no alert flags")
    by_node: dict[str, np.ndarray] = {}
    for node, rows in alerts.node_slices():
        by_node[str(node)] = alerts.window_index[rows][alerts.alert[rows]]
    out = []
    for ev in events:
        fired = by_node.get(ev.node, np.array([], dtype=np.int64))
        inside = fired[(fired >= ev.start_window - lookback) & (fired <= ev.start_window)]
        if inside.size:
            out.append((int(ev.start_window - inside.min()), True))
        else:
            out.append((0, False))
    return out


def compute_lead_time(
    events: Sequence[WeakEvent], alerts: ScoreSeries, lookback: int = 48,
    mode: str = "include-zero",
) -> LeadStats:
    """Aggregate lead statistics. ``mode='exclude'`` drops events with no alert in
    the lookback instead of counting them as lead 0. Stats are None without events."""
    if mode not in ("include-zero", "exclude"):
        raise ValueError(f"unknown lead mode {mode!r}")
    pairs = event_leads(events, alerts, lookback)
    leads = tuple(lead for lead, _ in pairs)
    detected = tuple(d for _, d in pairs)
    used = [lead for lead, d in pairs if d or mode == "include-zero"]
    if not used:
        return LeadStats(leads, detected, mode, None, None, None)
    return LeadStats(
        leads, detected, mode,
        float(sum(used) / len(used)), float(statistics.median(used)), float(max(used)),
    )


def alert_run_stats(alerts: ScoreSeries) -> tuple[int, float | None]:
    """(number of maximal alert runs, mean run length), runs taken per node and pooled."""
    if alerts.alert is None:
        raise ValueError("scores carry no alert flags")
    lengths = []
    for _node, rows in alerts.node_slices():
        lengths += [b - a + 1 for a, b in true_runs(alerts.alert[rows])]
    if not lengths:
        return 0, None
    return len(lengths), sum(lengths) / len(lengths)


@dataclass(frozen=True)
class EvaluationRow:
    plane: str
    detector: str
    lead: LeadStats
    runs: int
    avg_run_len: float | None
    alert_fraction: float
    threshold: float | None

    def as_dict(self) -> dict:
        return {
            "plane": self.plane, "detector": self.detector,
            "avgLead": self.lead.avg, "medianLead": self.lead.median, "maxLead": self.lead.max,
            "avgRunLen": self.avg_run_len, "runs": self.runs, "alertFraction": self.alert_fraction,
            "threshold": self.threshold, "leadMode": self.lead.mode,
            "leads": list(self.lead.leads),
        }


def evaluate_scores(
    events: Sequence[WeakEvent], scores: ScoreSeries, lookback: int = 48,
    mode: str = "include-zero",
) -> EvaluationRow:
    lead = compute_lead_time(events, scores, lookback, mode)
    runs, avg_len = alert_run_stats(scores)
    return EvaluationRow(scores.plane, scores.detector, lead, runs, avg_len,
                         scores.alert_fraction, scores.threshold)


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[EvaluationRow, ...]
    omitted: tuple[tuple[str, str], ...] = field(default=())  # (plane, reason)


def compare_planes(
    reports: Mapping[tuple[str, str], EvaluationRow] | Iterable[EvaluationRow],
    availability: AvailabilityMatrix,
    planes: Sequence[str] = ("gpu", "pipe", "os", "joint"),
) -> ComparisonTable:
    """Plane x detector comparison over available planes only; unavailable planes are
    listed with their reason rather than filled with zeros."""
    rows = list(reports.values()) if isinstance(reports, Mapping) else list(reports)
    order = {p: i for i, p in enumerate(planes)}
    kept, omitted = [], []
    for plane in planes:
        entry = availability.get(plane)
        if entry is None or not entry.available:
            reason = "plane unavailable" + (f" ({entry.reason})" if entry and entry.reason else "")
            omitted.append((plane, reason))
    unavailable = {p for p, _ in omitted}
    for r in rows:
        if r.plane in unavailable or r.plane not in order:
            continue
        kept.append(r)
    det_order = {d: i for i, d in enumerate(DISPLAY_NAMES)}
    kept.sort(key=lambda r: (order[r.plane], det_order.get(r.detector, 99)))
    return ComparisonTable(tuple(kept), tuple(omitted))


def _fmt(x: float | None, digits: int) -> str:
    return "" if x is None else f"{x:.{digits}f}"


def write_report(table: ComparisonTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in table.rows:
            w.writerow([
                PLANE_DISPLAY.get(r.plane, r.plane), DISPLAY_NAMES.get(r.detector, r.detector),
                _fmt(r.lead.avg, 3), _fmt(r.lead.median, 1), _fmt(r.lead.max, 1),
                _fmt(r.avg_run_len, 3), r.runs,
            ])


def write_events(
    events: Sequence[WeakEvent], rows: Iterable[EvaluationRow], path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for r in rows:
            for ev, lead in zip(events, r.lead.leads):
                w.writerow([ev.node, ev.start_window, ev.start_time, ev.length, lead,
                            r.detector, r.plane])


def plot_average_lead(table: ComparisonTable, path: str | Path) -> None:
    """Grouped bars of average lead: detectors on the x axis, one bar per plane."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    detectors = [d for d in DISPLAY_NAMES if any(r.detector == d for r in table.rows)]
    planes = []
    for r in table.rows:
        if r.plane not in planes:
            planes.append(r.plane)
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    width = 0.8 / max(len(planes), 1)
    for k, plane in enumerate(planes):
        heights = []
        for d in detectors:
            row = next((r for r in table.rows if r.plane == plane and r.detector == d), None)
            heights.append(row.lead.avg if row is not None and row.lead.avg is not None else 0.0)
        xs = np.arange(len(detectors)) + (k - (len(planes) - 1) / 2) * width
        bars = ax.bar(xs, heights, width, label=f"{PLANE_DISPLAY.get(plane, plane)} plane")
        ax.bar_label(bars, fmt="%.3f", fontsize=7)
    ax.set_xticks(np.arange(len(detectors)))
    ax.set_xticklabels([DISPLAY_NAMES[d] for d in detectors])
    ax.set_ylabel("Avg lead (windows)")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
