"""Tidy telemetry archives: parsing, per-node alignment, gap statistics, window sampling."""

from __future__ import annotations

import bz2
import csv
import hashlib
import io
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TIDY_HEADER = ["timestamp", "node", "metric", "labels", "value"]
GAP_STATS_HEADER = ["node", "metric", "labels", "missRatio", "gapCount", "longestGapSeconds"]

Labels = tuple[tuple[str, str], ...]
ColumnKey = tuple[str, Labels]


class ArchiveError(Exception):
    """Fatal problem with an input archive (unreadable, unknown header)."""


def parse_labels(text: str) -> Labels:
    """``"gpu=0;uuid=abc"`` -> ``(("gpu", "0"), ("uuid", "abc"))``, sorted by key."""
    text = text.strip()
    if not text:
        return ()
    pairs = []
    for part in text.split(";"):
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"bad label pair {part!r}")
        pairs.append((key.strip(), value.strip()))
    return tuple(sorted(pairs))


def format_labels(labels: Labels) -> str:
    return ";".join(f"{k}={v}" for k, v in labels)


def column_name(key: ColumnKey) -> str:
    metric, labels = key
    if not labels:
        return metric
    return metric + "{" + ",".join(f"{k}={v}" for k, v in labels) + "}"


@dataclass(frozen=True, slots=True)
class MetricSample:
    timestamp: int
    node: str
    metric: str
    labels: Labels
    value: float

    @property
    def key(self) -> ColumnKey:
        return (self.metric, self.labels)


@dataclass
class ParseDiagnostics:
    rows: int = 0
    malformed: int = 0
    duplicates: int = 0
    reasons: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class SliceSpec:
    """Reproducibility contract for one experiment.

    ``nodes=None`` selects every node present in the archives; ``start_time`` /
    ``end_time`` of ``None`` are resolved from the data by :func:`resolve_slice`.
    """

    nodes: frozenset[str] | None = None
    start_time: int | None = None
    end_time: int | None = None
    window_length: int = 3600
    stride: int = 600
    per_node_cap: int = 500
    seed: int = 0
    baseline_horizon: int = 144
    lead_lookback: int = 48

    def __post_init__(self):
        if self.nodes is not None and not isinstance(self.nodes, frozenset):
            object.__setattr__(self, "nodes", frozenset(self.nodes))
        if not 0 < self.stride <= self.window_length:
            raise ValueError("need 0 < stride <= window_length")
        if self.per_node_cap < 1:
            raise ValueError("per_node_cap must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if (
            self.start_time is not None
            and self.end_time is not None
            and not self.start_time < self.end_time
        ):
            raise ValueError("start_time must precede end_time")

    def as_dict(self) -> dict:
        return {
            "nodes": sorted(self.nodes) if self.nodes is not None else None,
            "startTime": self.start_time,
            "endTime": self.end_time,
            "windowLength": self.window_length,
            "stride": self.stride,
            "perNodeCap": self.per_node_cap,
            "seed": self.seed,
            "baselineHorizon": self.baseline_horizon,
            "leadLookback": self.lead_lookback,
        }


@dataclass(frozen=True)
class NodeSeries:
    """One node's telemetry on its own timeline; ``values[i, j]`` is NaN when column j
    has no sample at ``timeline[i]``."""

    node: str
    timeline: np.ndarray
    columns: tuple[ColumnKey, ...]
    values: np.ndarray
    native_interval: float

    def __post_init__(self):
        timeline = np.asarray(self.timeline, dtype=np.int64)
        values = np.asarray(self.values, dtype=float).reshape(len(timeline), len(self.columns))
        if len(timeline) > 1 and np.any(np.diff(timeline) <= 0):
            raise ValueError("timeline must be strictly increasing")
        timeline.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "timeline", timeline)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def mask(self) -> np.ndarray:
        """True where a sample is missing."""
        return np.isnan(self.values)

    def column(self, key: ColumnKey) -> np.ndarray:
        return self.values[:, self.columns.index(key)]

    def has(self, key: ColumnKey) -> bool:
        return key in self.columns

    def payload_counts(self) -> np.ndarray:
        """Number of present samples per timestamp, across all columns."""
        return (~self.mask).sum(axis=1)

    def dumps(self) -> bytes:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["timestamp", *(column_name(c) for c in self.columns)])
        for t, row in zip(self.timeline, self.values):
            writer.writerow([int(t), *("" if np.isnan(v) else repr(float(v)) for v in row)])
        return buf.getvalue().encode()


@dataclass(frozen=True)
class ColumnGaps:
    key: ColumnKey
    miss_ratio: float
    missing: int
    isolated: int
    histogram: dict[int, int]
    longest_gap_seconds: float

    @property
    def gap_count(self) -> int:
        return sum(self.histogram.values())


@dataclass(frozen=True)
class GapStats:
    node: str
    native_interval: float
    columns: tuple[ColumnGaps, ...]

    def histogram(self) -> dict[int, int]:
        total: Counter = Counter()
        for col in self.columns:
            total.update(col.histogram)
        return dict(sorted(total.items()))

    @property
    def longest_gap_seconds(self) -> float:
        return max((c.longest_gap_seconds for c in self.columns), default=0.0)


def _open_text(path: Path):
    if path.suffix == ".bz2":
        return io.TextIOWrapper(bz2.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def parse_archive(
    path: str | Path, diagnostics: ParseDiagnostics | None = None
) -> list[MetricSample]:
    """Read a tidy CSV (optionally ``.bz2``) into samples.

    Malformed rows are skipped and tallied; duplicate (node, metric, labels,
    timestamp) rows keep the last occurrence, at the position of the first.
    """
    path = Path(path)
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    try:
        fh = _open_text(path)
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc

    samples: list[MetricSample] = []
    position: dict[tuple, int] = {}
    try:
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != TIDY_HEADER:
                raise ArchiveError(f"{path}: unknown header {header!r}")
            for row in reader:
                if not row:
                    continue
                diag.rows += 1
                sample = _parse_row(row, diag)
                if sample is None:
                    continue
                ident = (sample.node, sample.metric, sample.labels, sample.timestamp)
                at = position.get(ident)
                if at is None:
                    position[ident] = len(samples)
                    samples.append(sample)
                else:
                    diag.duplicates += 1
                    samples[at] = sample
    except (OSError, EOFError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc
    if diag.malformed or diag.duplicates:
        logger.warning(
            "%s: %d malformed rows skipped, %d duplicates overwritten",
            path.name, diag.malformed, diag.duplicates,
        )
    return samples


def _parse_row(row: list[str], diag: ParseDiagnostics) -> MetricSample | None:
    if len(row) != 5:
        diag.malformed += 1
        diag.reasons["fieldCount"] += 1
        return None
    ts_text, node, metric, label_text, value_text = row
    try:
        ts = float(ts_text)
        value = float(value_text)
        labels = parse_labels(label_text)
    except ValueError:
        diag.malformed += 1
        diag.reasons["unparseable"] += 1
        return None
    if not (math.isfinite(ts) and ts >= 0):
        diag.malformed += 1
        diag.reasons["timestamp"] += 1
        return None
    if not math.isfinite(value):
        diag.malformed += 1
        diag.reasons["nonFinite"] += 1
        return None
    node, metric = node.strip(), metric.strip()
    if not node or not metric:
        diag.malformed += 1
        diag.reasons["emptyField"] += 1
        return None
    return MetricSample(int(ts), node, metric, labels, value)


def write_archive(samples: Iterable[MetricSample], path: str | Path) -> int:
    """Write samples as a tidy CSV; bzip2 when the suffix is ``.bz2``. Returns row count."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TIDY_HEADER)
    n = 0
    for s in samples:
        writer.writerow([s.timestamp, s.node, s.metric, format_labels(s.labels), repr(s.value)])
        n += 1
    data = buf.getvalue().encode()
    if path.suffix == ".bz2":
        data = bz2.compress(data, 9)
    path.write_bytes(data)
    return n


def resolve_slice(samples: Sequence[MetricSample], spec: SliceSpec) -> SliceSpec:
    """Fill in unset node set / time bounds from the data."""
    if spec.nodes is not None and spec.start_time is not None and spec.end_time is not None:
        return spec
    nodes = spec.nodes
    if nodes is None:
        nodes = frozenset(s.node for s in samples)
    ts = [s.timestamp for s in samples if s.node in nodes]
    if not ts:
        raise ValueError("no samples for the selected nodes")
    start = spec.start_time if spec.start_time is not None else min(ts)
    end = spec.end_time if spec.end_time is not None else max(ts)
    if end <= start:
        end = start + 1
    return SliceSpec(
        nodes=nodes, start_time=start, end_time=end,
        window_length=spec.window_length, stride=spec.stride,
        per_node_cap=spec.per_node_cap, seed=spec.seed,
        baseline_horizon=spec.baseline_horizon, lead_lookback=spec.lead_lookback,
    )


def native_interval(timeline: np.ndarray) -> float:
    if len(timeline) < 2:
        return float("nan")
    return float(np.median(np.diff(timeline)))


def build_node_series(
    samples: Iterable[MetricSample], spec: SliceSpec
) -> dict[str, NodeSeries]:
    """Align samples onto one timeline per node (union of observed timestamps).

    Unset ``spec.nodes`` keeps every node; unset bounds do not filter.
    """
    lo = spec.start_time if spec.start_time is not None else -math.inf
    hi = spec.end_time if spec.end_time is not None else math.inf
    grouped: dict[str, list[MetricSample]] = defaultdict(list)
    for s in samples:
        if spec.nodes is not None and s.node not in spec.nodes:
            continue
        if lo <= s.timestamp <= hi:
            grouped[s.node].append(s)

    wanted = sorted(spec.nodes) if spec.nodes is not None else sorted(grouped)
    out: dict[str, NodeSeries] = {}
    for node in wanted:
        rows = grouped.get(node)
        if not rows:
            logger.warning("node %s has no samples in the slice; excluded", node)
            continue
        out[node] = _align(node, rows)
    if not out:
        raise ValueError("no node has samples inside the slice")
    return out


def _align(node: str, rows: list[MetricSample]) -> NodeSeries:
    columns = sorted({s.key for s in rows})
    col_index = {c: j for j, c in enumerate(columns)}
    ts = np.fromiter((s.timestamp for s in rows), dtype=np.int64, count=len(rows))
    timeline = np.unique(ts)
    row_index = np.searchsorted(timeline, ts)
    cols = np.fromiter((col_index[s.key] for s in rows), dtype=np.int64, count=len(rows))
    vals = np.fromiter((s.value for s in rows), dtype=float, count=len(rows))
    values = np.full((len(timeline), len(columns)), np.nan)
    values[row_index, cols] = vals
    return NodeSeries(node, timeline, tuple(columns), values, native_interval(timeline))


def _missing_runs(missing: np.ndarray) -> list[int]:
    """Lengths of maximal runs of True."""
    if not missing.any():
        return []
    padded = np.concatenate(([False], missing, [False])).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return (ends - starts).tolist()


def compute_gap_stats(series: NodeSeries) -> GapStats:
    """Missingness ratio and gap-length histogram per column.

    A gap is a maximal run of two or more missing entries; single missing
    entries are counted as ``isolated``. A column with no samples at all has
    no bounded gap and its longest gap spans the whole timeline.
    """
    if not series.columns:
        raise ValueError("series has no columns")
    n = len(series.timeline)
    interval = series.native_interval if math.isfinite(series.native_interval) else 0.0
    mask = series.mask
    stats = []
    for j, key in enumerate(series.columns):
        missing = mask[:, j]
        count = int(missing.sum())
        ratio = count / n if n else 1.0
        if n == 0 or count == n:
            stats.append(ColumnGaps(key, 1.0, count, 0, {}, n * interval))
            continue
        runs = _missing_runs(missing)
        gaps = [r for r in runs if r >= 2]
        hist = dict(sorted(Counter(gaps).items()))
        longest = max(runs, default=0)
        stats.append(
            ColumnGaps(key, ratio, count, runs.count(1), hist, longest * interval)
        )
    return GapStats(series.node, series.native_interval, tuple(stats))


def write_gap_stats(stats: Iterable[GapStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GAP_STATS_HEADER)
        for gs in stats:
            for col in gs.columns:
                metric, labels = col.key
                writer.writerow([
                    gs.node, metric, format_labels(labels), f"{col.miss_ratio:.6f}",
                    col.gap_count, f"{col.longest_gap_seconds:.1f}",
                ])


def node_seed(seed: int, node: str) -> int:
    """Stable 64-bit seed derived from (slice seed, node id)."""
    digest = hashlib.sha256(f"{seed}:{node}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_windows(
    windows: Mapping[str, Sequence[int]], spec: SliceSpec
) -> list[tuple[str, int]]:
    """Cap each node at ``spec.per_node_cap`` windows, drawn uniformly without
    replacement. Output is ordered by node id, then window index."""
    selected: list[tuple[str, int]] = []
    for node in sorted(windows):
        idx = np.asarray(sorted(windows[node]), dtype=np.int64)
        if len(idx) > spec.per_node_cap:
            rng = np.random.default_rng(node_seed(spec.seed, node))
            idx = np.sort(rng.choice(idx, size=spec.per_node_cap, replace=False))
        selected.extend((node, int(i)) for i in idx)
    return selected
