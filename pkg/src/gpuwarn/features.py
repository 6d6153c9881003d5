"""Windowed aggregation, robust scaling, the 16-column drift signature and feature planes."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import Labels, NodeSeries, SliceSpec

logger = logging.getLogger(__name__)

# Metric names the planes are built from.
MEM_TEMP = "DCGM_FI_DEV_MEMORY_TEMP"
AMBIENT_TEMP = "node_ambient_temp_celsius"
SCRAPE_DURATION = "scrape_duration_seconds"
SCRAPE_SUCCESS = "up"
SCRAPE_SAMPLES = "scrape_samples_scraped"
PIPE_METRICS = (SCRAPE_DURATION, SCRAPE_SUCCESS, SCRAPE_SAMPLES)
OS_METRICS = ("node_load1", "node_load5", "node_load15", "node_memory_MemAvailable_bytes")

# Per-window structural indicators of the monitoring pipeline.
GAP_FRACTION = "scrape_gap_fraction"
FAMILY_CARDINALITY = "scrape_family_cardinality"

PLANES = ("gpu", "pipe", "os")
AGGREGATES = ("mean", "std", "min", "max", "slope")
AGG_ORDER = {a: i for i, a in enumerate(AGGREGATES + ("drift", "rollSlope"))}

N_GPUS = 4
ROLL_HORIZON = 32
MIN_SAMPLES_PER_WINDOW = 2
DRIFT_WARMUP = 12
MAD_CONSISTENCY = 1.4826
SCALE_EPS = 1e-9

SIGNATURE_COLUMNS: tuple[str, ...] = tuple(
    [f"memTemp_drift_{stat}_gpu{g}" for g in range(N_GPUS) for stat in ("avg", "min", "max")]
    + [f"ambient_drift_{stat}" for stat in ("avg", "min", "max")]
    + [f"memTemp_rollSlope_{ROLL_HORIZON}"]
)
_STAT_TO_AGG = {"avg": "mean", "min": "min", "max": "max"}


def classify_metric(metric: str) -> str | None:
    """Plane a raw metric family feeds, or None when it is not used."""
    if metric in (MEM_TEMP, AMBIENT_TEMP):
        return "gpu"
    if metric in PIPE_METRICS:
        return "pipe"
    if metric in OS_METRICS:
        return "os"
    return None


@dataclass(frozen=True)
class FeatureColumn:
    plane: str
    metric: str
    labels: Labels
    agg: str

    @property
    def name(self) -> str:
        label_part = ""
        if self.labels:
            label_part = "{" + ",".join(f"{k}={v}" for k, v in self.labels) + "}"
        return f"{self.plane}.{self.metric}{label_part}.{self.agg}"

    def sort_key(self):
        return (PLANES.index(self.plane), self.metric, self.labels, AGG_ORDER.get(self.agg, 99))


@dataclass(frozen=True)
class WindowFeatureMatrix:
    """Windows x features. Rows are ordered by node, then window index; NaN marks missing."""

    nodes: np.ndarray
    window_index: np.ndarray
    window_start: np.ndarray
    columns: tuple[FeatureColumn, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(len(self.nodes), len(self.columns))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=object))
        object.__setattr__(self, "window_index", np.asarray(self.window_index, dtype=np.int64))
        object.__setattr__(self, "window_start", np.asarray(self.window_start, dtype=np.int64))
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return len(self.nodes)

    @property
    def mask(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def index_of(self, column: FeatureColumn) -> int | None:
        try:
            return self.columns.index(column)
        except ValueError:
            return None

    def get(self, column: FeatureColumn) -> np.ndarray:
        j = self.index_of(column)
        if j is None:
            return np.full(self.n_rows, np.nan)
        return self.values[:, j]

    def select(self, columns: Sequence[FeatureColumn]) -> "WindowFeatureMatrix":
        idx = [self.columns.index(c) for c in columns]
        return WindowFeatureMatrix(
            self.nodes, self.window_index, self.window_start, tuple(columns),
            self.values[:, idx],
        )

    def take(self, rows: np.ndarray) -> "WindowFeatureMatrix":
        rows = np.asarray(rows)
        return WindowFeatureMatrix(
            self.nodes[rows], self.window_index[rows], self.window_start[rows], self.columns,
            self.values[rows],
        )

    def node_slices(self) -> list[tuple[str, slice]]:
        """Contiguous row ranges per node."""
        out = []
        start = 0
        for i in range(1, self.n_rows + 1):
            if i == self.n_rows or self.nodes[i] != self.nodes[start]:
                out.append((self.nodes[start], slice(start, i)))
                start = i
        return out

    def write_csv(self, path: str | Path, mask_path: str | Path | None = None) -> None:
        header = ["node", "windowIndex", "windowStart", *self.names]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n_rows):
                w.writerow([
                    self.nodes[i], int(self.window_index[i]), int(self.window_start[i]),
                    *("" if math.isnan(v) else repr(float(v)) for v in self.values[i]),
                ])
        if mask_path is not None:
            mask = self.mask
            with open(mask_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for i in range(self.n_rows):
                    w.writerow([
                        self.nodes[i], int(self.window_index[i]), int(self.window_start[i]),
                        *(int(m) for m in mask[i]),
                    ])


def hstack(matrices: Sequence[WindowFeatureMatrix]) -> WindowFeatureMatrix:
    """Concatenate column blocks that share the same rows."""
    first = matrices[0]
    for m in matrices[1:]:
        if not (np.array_equal(m.nodes, first.nodes) and np.array_equal(m.window_index, first.window_index)):
            raise ValueError("row mismatch in column concatenation")
    return WindowFeatureMatrix(
        first.nodes, first.window_index, first.window_start,
        tuple(c for m in matrices for c in m.columns),
        np.hstack([m.values for m in matrices]) if matrices else first.values,
    )


def vstack(matrices: Sequence[WindowFeatureMatrix]) -> WindowFeatureMatrix:
    """Concatenate row blocks (e.g. per-node matrices) over the union of their columns."""
    columns = sorted({c for m in matrices for c in m.columns}, key=FeatureColumn.sort_key)
    col_index = {c: j for j, c in enumerate(columns)}
    n = sum(m.n_rows for m in matrices)
    values = np.full((n, len(columns)), np.nan)
    row = 0
    for m in matrices:
        idx = [col_index[c] for c in m.columns]
        values[row:row + m.n_rows, idx] = m.values
        row += m.n_rows
    return WindowFeatureMatrix(
        np.concatenate([m.nodes for m in matrices]) if matrices else np.array([], dtype=object),
        np.concatenate([m.window_index for m in matrices]) if matrices else np.array([], dtype=np.int64),
        np.concatenate([m.window_start for m in matrices]) if matrices else np.array([], dtype=np.int64),
        tuple(columns), values,
    )


def window_starts(spec: SliceSpec) -> np.ndarray:
    """Start times of every window [start, start + w) lying inside the slice."""
    if spec.start_time is None or spec.end_time is None:
        raise ValueError("slice bounds must be resolved before windowing")
    span = spec.end_time + 1 - spec.start_time
    if span < spec.window_length:
        return np.array([], dtype=np.int64)
    count = (span - spec.window_length) // spec.stride + 1
    return spec.start_time + spec.stride * np.arange(count, dtype=np.int64)


def _window_aggregates(t: np.ndarray, v: np.ndarray, min_samples: int) -> np.ndarray:
    """mean, std, min, max, slope for each column of ``v`` (rows aligned with ``t``)."""
    out = np.full((v.shape[1], 5), np.nan)
    if v.shape[0] == 0:
        return out
    present = ~np.isnan(v)
    n = present.sum(axis=0)
    ok = n >= min_samples
    if not ok.any():
        return out
    vz = np.where(present, v, 0.0)
    tt = (t - t[0]).astype(float)[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vz.sum(axis=0) / n
        dev = np.where(present, v - mean, 0.0)
        std = np.sqrt((dev ** 2).sum(axis=0) / n)
        tmean = (present * tt).sum(axis=0) / n
        tdev = np.where(present, tt - tmean, 0.0)
        sxx = (tdev ** 2).sum(axis=0)
        slope = np.where(sxx > 0, (tdev * dev).sum(axis=0) / sxx, 0.0)
    vmin = np.where(present, v, np.inf).min(axis=0)
    vmax = np.where(present, v, -np.inf).max(axis=0)
    stacked = np.stack([mean, std, vmin, vmax, slope], axis=1)
    out[ok] = stacked[ok]
    return out


def aggregate_windows(
    series: NodeSeries, spec: SliceSpec, min_samples: int = MIN_SAMPLES_PER_WINDOW
) -> WindowFeatureMatrix:
    """Per-window mean/std/min/max/slope of every plane-relevant column of one node.

    Windows with fewer than ``min_samples`` present samples in a column are
    emitted as missing for that column. Slopes are in value units per second and
    std is the population standard deviation. When the node carries any scrape
    metric, two structural pipe features are added per window: the fraction of
    expected scrapes absent from the timeline and the mean number of metric
    columns present per scrape.
    """
    starts = window_starts(spec)
    keys = [k for k in series.columns if classify_metric(k[0]) is not None]
    src = np.array([series.columns.index(k) for k in keys], dtype=np.int64)
    columns = [
        FeatureColumn(classify_metric(m), m, labels, agg) for (m, labels) in keys for agg in AGGREGATES
    ]
    structural = any(k[0] in PIPE_METRICS for k in keys)
    if structural:
        columns += [
            FeatureColumn("pipe", GAP_FRACTION, (), "mean"),
            FeatureColumn("pipe", FAMILY_CARDINALITY, (), "mean"),
        ]

    t = series.timeline
    v = series.values[:, src] if len(src) else np.empty((len(t), 0))
    payload = series.payload_counts()
    expected = spec.window_length / series.native_interval if series.native_interval > 0 else math.nan
    values = np.full((len(starts), len(columns)), np.nan)
    lo = np.searchsorted(t, starts, side="left")
    hi = np.searchsorted(t, starts + spec.window_length, side="left")
    n_agg = len(keys) * len(AGGREGATES)
    for k in range(len(starts)):
        a, b = lo[k], hi[k]
        if n_agg:
            values[k, :n_agg] = _window_aggregates(t[a:b], v[a:b], min_samples).reshape(-1)
        if structural:
            count = b - a
            if math.isfinite(expected):
                values[k, n_agg] = 1.0 - min(1.0, count / expected)
            values[k, n_agg + 1] = payload[a:b].mean() if count else 0.0

    order = sorted(range(len(columns)), key=lambda j: columns[j].sort_key())
    return WindowFeatureMatrix(
        np.full(len(starts), series.node, dtype=object),
        np.arange(len(starts), dtype=np.int64),
        starts,
        tuple(columns[j] for j in order),
        values[:, order],
    )


def build_feature_matrix(
    series_by_node: Mapping[str, NodeSeries], spec: SliceSpec
) -> WindowFeatureMatrix:
    return vstack([aggregate_windows(series_by_node[n], spec) for n in sorted(series_by_node)])


@dataclass(frozen=True)
class RobustScaler:
    """Per-feature median / MAD scaling; ``kept`` indexes features with training data."""

    center: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    names: tuple[str, ...] = ()

    def transform(self, values: np.ndarray) -> np.ndarray:
        x = np.asarray(values, dtype=float)[:, self.kept]
        return (x - self.center) / self.scale

    def as_dict(self) -> dict:
        return {
            "features": list(self.names),
            "center": [float(c) for c in self.center],
            "scale": [float(s) for s in self.scale],
        }


def fit_robust_scaler(
    values: np.ndarray, train_rows: np.ndarray | Sequence[int] | None = None,
    names: Sequence[str] | None = None,
) -> RobustScaler:
    """center = median, scale = 1.4826 * MAD over present training values.

    Zero-MAD features fall back to max(std, 1e-9); features without any present
    training value are dropped.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    train = values if train_rows is None else values[np.asarray(train_rows)]
    if train.shape[0] == 0:
        raise ValueError("training rows must be non-empty")
    names = tuple(names) if names is not None else tuple(str(j) for j in range(values.shape[1]))
    kept, centers, scales = [], [], []
    for j in range(values.shape[1]):
        x = train[:, j]
        x = x[~np.isnan(x)]
        if x.size == 0:
            logger.warning("feature %s has no training data; dropped", names[j])
            continue
        c = float(np.median(x))
        s = MAD_CONSISTENCY * float(np.median(np.abs(x - c)))
        if s == 0.0:
            s = max(float(np.std(x)), SCALE_EPS)
        kept.append(j)
        centers.append(c)
        scales.append(s)
    return RobustScaler(
        np.array(centers), np.array(scales), np.array(kept, dtype=np.int64),
        tuple(names[j] for j in kept),
    )


def max_abs_z(z: np.ndarray) -> np.ndarray:
    """Row-wise max |z| over present entries; NaN for rows with nothing present."""
    a = np.abs(z)
    out = np.full(a.shape[0], np.nan)
    if a.shape[1] == 0:
        return out
    present = ~np.isnan(a).all(axis=1)
    out[present] = np.nanmax(a[present], axis=1)
    return out


def trailing_median(x: np.ndarray, horizon: int, min_count: int = DRIFT_WARMUP) -> np.ndarray:
    """Median of the present values among the ``horizon`` entries strictly before each index."""
    n = len(x)
    out = np.full(n, np.nan)
    if n == 0:
        return out
    padded = np.concatenate([np.full(horizon, np.nan), x.astype(float)])
    view = sliding_window_view(padded, horizon)[:n]
    counts = (~np.isnan(view)).sum(axis=1)
    ok = counts >= min_count
    if ok.any():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[ok] = np.nanmedian(view[ok], axis=1)
    return out


def rolling_slope(x: np.ndarray, horizon: int = ROLL_HORIZON, min_count: int = DRIFT_WARMUP) -> np.ndarray:
    """Least-squares slope per index step over the trailing ``horizon`` entries (inclusive)."""
    n = len(x)
    out = np.full(n, np.nan)
    if n == 0:
        return out
    padded = np.concatenate([np.full(horizon - 1, np.nan), x.astype(float)])
    view = sliding_window_view(padded, horizon)[:n]
    present = ~np.isnan(view)
    cnt = present.sum(axis=1)
    pos = np.arange(horizon, dtype=float)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar = (present * pos).sum(axis=1) / cnt
        ybar = np.where(present, view, 0.0).sum(axis=1) / cnt
        dx = np.where(present, pos - xbar[:, None], 0.0)
        dy = np.where(present, view - ybar[:, None], 0.0)
        slope = (dx * dy).sum(axis=1) / (dx ** 2).sum(axis=1)
    ok = (cnt >= max(min_count, 2)) & ~np.isnan(x)
    out[ok] = slope[ok]
    return out


def gpu_label(g: int) -> Labels:
    return (("gpu", str(g)),)


def node_mean_mem_temp(matrix: WindowFeatureMatrix) -> np.ndarray:
    cols = [matrix.get(FeatureColumn("gpu", MEM_TEMP, gpu_label(g), "mean")) for g in range(N_GPUS)]
    stacked = np.vstack(cols).T
    out = np.full(matrix.n_rows, np.nan)
    present = ~np.isnan(stacked).all(axis=1)
    out[present] = np.nanmean(stacked[present], axis=1)
    return out


@dataclass(frozen=True)
class SignatureMatrix:
    nodes: np.ndarray
    window_index: np.ndarray
    window_start: np.ndarray
    values: np.ndarray
    scalar: np.ndarray
    level: np.ndarray
    scaler: RobustScaler
    missing_sources: tuple[str, ...] = field(default=())
    columns: tuple[str, ...] = SIGNATURE_COLUMNS

    def node_slices(self) -> list[tuple[str, slice]]:
        return WindowFeatureMatrix(
            self.nodes, self.window_index, self.window_start, (), np.empty((len(self.nodes), 0))
        ).node_slices()

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "windowIndex", "windowStart", *self.columns, "signature"])
            for i in range(len(self.nodes)):
                row = [*self.values[i], self.scalar[i]]
                w.writerow([
                    self.nodes[i], int(self.window_index[i]), int(self.window_start[i]),
                    *("" if math.isnan(v) else repr(float(v)) for v in row),
                ])


def signature_feature_columns() -> tuple[FeatureColumn, ...]:
    """Plane-tagged columns for the 16 signature entries, in signature order."""
    cols = []
    for name in SIGNATURE_COLUMNS:
        parts = name.split("_")
        if parts[1] == "rollSlope":
            cols.append(FeatureColumn("gpu", f"memTemp_{parts[2]}", (), "rollSlope"))
        elif parts[0] == "memTemp":
            cols.append(FeatureColumn("gpu", f"memTemp_{parts[2]}", gpu_label(int(parts[3][3:])), "drift"))
        else:
            cols.append(FeatureColumn("gpu", f"ambient_{parts[2]}", (), "drift"))
    return tuple(cols)


def build_signature(
    matrix: WindowFeatureMatrix, spec: SliceSpec, warmup: int = DRIFT_WARMUP,
    roll_horizon: int = ROLL_HORIZON,
) -> SignatureMatrix:
    """Drift of memory / ambient temperature window aggregates against a causal
    trailing median, plus the rolling memory-temperature slope, and the scalar
    signature max |robust z| over the 16 columns."""
    sources: list[FeatureColumn] = []
    for g in range(N_GPUS):
        for stat in ("avg", "min", "max"):
            sources.append(FeatureColumn("gpu", MEM_TEMP, gpu_label(g), _STAT_TO_AGG[stat]))
    for stat in ("avg", "min", "max"):
        sources.append(FeatureColumn("gpu", AMBIENT_TEMP, (), _STAT_TO_AGG[stat]))
    missing = tuple(c.name for c in sources if matrix.index_of(c) is None)
    if missing:
        logger.warning("signature sources absent from slice: %s", ", ".join(missing))

    values = np.full((matrix.n_rows, len(SIGNATURE_COLUMNS)), np.nan)
    level = node_mean_mem_temp(matrix)
    for _node, rows in matrix.node_slices():
        idx = matrix.window_index[rows]
        if len(idx) and not np.array_equal(idx, np.arange(idx[0], idx[0] + len(idx))):
            raise ValueError("signature needs every window of a node, in order")
        for j, col in enumerate(sources):
            x = matrix.get(col)[rows]
            values[rows, j] = x - trailing_median(x, spec.baseline_horizon, warmup)
        values[rows, len(sources)] = rolling_slope(level[rows], roll_horizon, warmup)

    names = SIGNATURE_COLUMNS
    present_rows = ~np.isnan(values).all(axis=1)
    if present_rows.any():
        scaler = fit_robust_scaler(values, np.flatnonzero(present_rows), names)
        z = scaler.transform(values)
        scalar = max_abs_z(z)
    else:
        scaler = RobustScaler(np.array([]), np.array([]), np.array([], dtype=np.int64))
        scalar = np.full(matrix.n_rows, np.nan)
    return SignatureMatrix(
        matrix.nodes, matrix.window_index, matrix.window_start, values, scalar, level,
        scaler, missing,
    )


@dataclass(frozen=True)
class PlaneAvailability:
    slice_name: str
    plane: str
    available: bool
    column_count: int
    reason: str = ""


@dataclass(frozen=True)
class AvailabilityMatrix:
    entries: tuple[PlaneAvailability, ...]

    def is_available(self, plane: str) -> bool:
        return any(e.plane == plane and e.available for e in self.entries)

    def get(self, plane: str) -> PlaneAvailability | None:
        for e in self.entries:
            if e.plane == plane:
                return e
        return None

    def as_rows(self) -> list[dict]:
        return [
            {"slice": e.slice_name, "plane": e.plane, "available": e.available,
             "columnCount": e.column_count, "reason": e.reason}
            for e in self.entries
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slice", "plane", "available", "columnCount"])
            for e in self.entries:
                w.writerow([e.slice_name, e.plane, str(e.available).lower(), e.column_count])


def _nonempty(m: WindowFeatureMatrix) -> bool:
    return m.values.size > 0 and bool((~np.isnan(m.values)).any())


def assemble_planes(
    matrix: WindowFeatureMatrix, signature: SignatureMatrix, slice_name: str = "slice"
) -> tuple[dict[str, WindowFeatureMatrix], AvailabilityMatrix]:
    """GPU plane (signature + node-mean memory temperature), pipe and OS planes, and
    the joint plane over every available plane."""
    gpu_cols = signature_feature_columns() + (FeatureColumn("gpu", "memTemp_nodeMean", (), "mean"),)
    gpu = WindowFeatureMatrix(
        matrix.nodes, matrix.window_index, matrix.window_start, gpu_cols,
        np.column_stack([signature.values, signature.level]),
    )
    has_scrape = any(c.plane == "pipe" and c.metric in PIPE_METRICS for c in matrix.columns)
    pipe = matrix.select([c for c in matrix.columns if c.plane == "pipe"] if has_scrape else [])
    os_ = matrix.select([c for c in matrix.columns if c.plane == "os"])

    candidates = {"gpu": gpu, "pipe": pipe, "os": os_}
    planes: dict[str, WindowFeatureMatrix] = {}
    entries = []
    for name, m in candidates.items():
        if len(m.columns) == 0:
            entries.append(PlaneAvailability(slice_name, name, False, 0, "no source metrics"))
        elif not _nonempty(m):
            entries.append(PlaneAvailability(slice_name, name, False, 0, "all values missing"))
        else:
            planes[name] = m
            entries.append(PlaneAvailability(slice_name, name, True, len(m.columns)))
    if planes:
        joint = hstack([planes[p] for p in PLANES if p in planes])
        planes["joint"] = joint
        entries.append(PlaneAvailability(slice_name, "joint", True, len(joint.columns)))
    else:
        entries.append(PlaneAvailability(slice_name, "joint", False, 0, "no plane available"))
    return planes, AvailabilityMatrix(tuple(entries))


def describe_planes(planes: Mapping[str, WindowFeatureMatrix]) -> dict[str, list[str]]:
    """Column composition of each plane, for the run manifest."""
    return {name: m.names for name, m in planes.items()}
