"""Stage functions shared by the CLI: each takes in-memory inputs plus a RunConfig and
writes its CSV outputs into the run directory."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import (
    IncidentRecord,
    StateTransition,
    filter_category,
    parse_catalog,
    parse_transitions,
    refine_incident_time,
    transitions_from_samples,
    write_refined_catalog,
)
from .detectors import DETECTORS, DetectorConfig, DetectorRun, run_detector, write_scores
from .evaluation import (
    ComparisonTable,
    WeakEvent,
    compare_planes,
    evaluate_scores,
    extract_weak_events,
    plot_average_lead,
    write_events,
    write_report,
)
from .features import (
    AvailabilityMatrix,
    SignatureMatrix,
    WindowFeatureMatrix,
    assemble_planes,
    build_feature_matrix,
    build_signature,
    describe_planes,
)
from .forensics import (
    IncidentForensics,
    analyze_incident,
    write_alignment,
    write_disappearance,
    write_summaries,
)
from .ingest import (
    MetricSample,
    NodeSeries,
    ParseDiagnostics,
    SliceSpec,
    build_node_series,
    compute_gap_stats,
    parse_archive,
    resolve_slice,
    sample_windows,
    write_gap_stats,
)

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every knob of a run. Defaults are the reference configuration."""

    # slice
    window_length: int = 3600
    stride: int = 600
    per_node_cap: int = 500
    seed: int = 0
    baseline_horizon: int = 144
    roll_horizon: int = 32
    start_time: int | None = None
    end_time: int | None = None
    nodes: list[str] | None = None
    # detection
    budget: float = 0.01
    smooth: int = 5
    per_node_threshold: bool = False
    detectors: list[str] = field(default_factory=lambda: list(DETECTORS))
    if_trees: int = 100
    if_subsample: int = 256
    svm_nu: float = 0.05
    svm_max_train: int = 2000
    svm_tol: float = 1e-4
    # evaluation
    q: float = 0.99
    min_run: int = 3
    lookback: int = 48
    lead_mode: str = "include-zero"
    pooled_quantile: bool = False
    # forensics
    scrape_interval: int = 600
    dropout: int = 3000
    baseline_minutes: float = 30
    adjacent_minutes: float = 5
    adjacent_side: str = "before"
    category: str | None = None
    # inputs
    archives: list[str] = field(default_factory=list)
    catalog: str | None = None
    transitions: str | None = None
    scenario: str | None = None
    scenario_nodes: int = 1
    scenario_days: float = 7
    run_timestamp: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def slice_spec(self) -> SliceSpec:
        return SliceSpec(
            nodes=frozenset(self.nodes) if self.nodes else None,
            start_time=self.start_time, end_time=self.end_time,
            window_length=self.window_length, stride=self.stride,
            per_node_cap=self.per_node_cap, seed=self.seed,
            baseline_horizon=self.baseline_horizon, lead_lookback=self.lookback,
        )

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            budget=self.budget, smooth_window=self.smooth,
            per_node_threshold=self.per_node_threshold, if_trees=self.if_trees,
            if_subsample=self.if_subsample, svm_nu=self.svm_nu,
            svm_max_train=self.svm_max_train, svm_tol=self.svm_tol, seed=self.seed,
        )

    def decision_flags(self) -> dict:
        return {
            "thresholdScope": "perNode" if self.per_node_threshold else "global",
            "quantileMethod": "nearestRank",
            "signatureQuantile": "pooled" if self.pooled_quantile else "perNode",
            "leadMode": self.lead_mode,
            "adjacentSide": self.adjacent_side,
            "smoothing": "trailing",
            "imputation": "median+fractionMissing",
            "driftSource": "windowAggregate",
            "trainingRows": "perNodeCapSample",
            "evaluatedRows": "signaturePresent",
            "alignmentMethod": "scrapeCountDrop",
        }


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunState:
    """What a run accumulates on its way to the manifest."""

    config: RunConfig
    out: Path
    inputs: dict[str, str] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    spec: SliceSpec | None = None
    samples: list[MetricSample] = field(default_factory=list)
    series: dict[str, NodeSeries] = field(default_factory=dict)
    matrix: WindowFeatureMatrix | None = None
    signature: SignatureMatrix | None = None
    planes: dict[str, WindowFeatureMatrix] = field(default_factory=dict)
    availability: AvailabilityMatrix | None = None
    runs: dict[tuple[str, str], DetectorRun] = field(default_factory=dict)
    events: list[WeakEvent] = field(default_factory=list)
    table: ComparisonTable | None = None
    records: list[IncidentRecord] = field(default_factory=list)
    forensics: list[IncidentForensics] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    archive_paths: list[str] = field(default_factory=list)
    catalog_path: str | None = None
    transitions_path: str | None = None
    archive_of: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.archive_paths = self.archive_paths or list(self.config.archives)
        self.catalog_path = self.catalog_path or self.config.catalog
        self.transitions_path = self.transitions_path or self.config.transitions

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def record_input(self, path: str | Path, label: str | None = None) -> None:
        self.inputs[label or Path(path).name] = sha256_file(path)


def load_samples(state: RunState) -> None:
    if not state.archive_paths:
        raise ValueError("no archive given")
    samples: list[MetricSample] = []
    per_file = {}
    for a in state.archive_paths:
        diag = ParseDiagnostics()
        rows = parse_archive(a, diag)
        for node in sorted({s.node for s in rows}):
            state.archive_of.setdefault(node, Path(a).name)
        samples.extend(rows)
        per_file[Path(a).name] = {"rows": diag.rows, "malformed": diag.malformed,
                                  "duplicates": diag.duplicates}
        state.record_input(a)
    state.samples = samples
    state.diagnostics["archives"] = per_file
    state.spec = resolve_slice(samples, state.config.slice_spec())
    state.series = build_node_series(samples, state.spec)


def stage_ingest(state: RunState) -> None:
    stats = [compute_gap_stats(s) for s in state.series.values()]
    write_gap_stats(stats, state.path("gap_stats.csv"))
    state.diagnostics["nativeInterval"] = {n: s.native_interval for n, s in state.series.items()}


def stage_features(state: RunState, write: bool = True) -> None:
    spec = state.spec
    matrix = build_feature_matrix(state.series, spec)
    signature = build_signature(matrix, spec, roll_horizon=state.config.roll_horizon)
    planes, availability = assemble_planes(matrix, signature, "slice")
    evaluated = np.flatnonzero(~np.isnan(signature.scalar))
    if evaluated.size == 0:
        raise ValueError("signature is undefined on every window; slice too short")
    state.matrix = matrix
    state.signature = signature
    state.planes = {name: m.take(evaluated) for name, m in planes.items()}
    state.availability = availability
    if write:
        matrix.write_csv(state.path("features.csv"), state.path("features_mask.csv"))
        signature.write_csv(state.path("signature.csv"))
        availability.write_csv(state.path("availability.csv"))


def training_rows(matrix: WindowFeatureMatrix, spec: SliceSpec) -> np.ndarray:
    """Row positions of the per-node capped window sample."""
    windows: dict[str, list[int]] = {}
    for node, rows in matrix.node_slices():
        windows[str(node)] = matrix.window_index[rows].tolist()
    chosen = set(sample_windows(windows, spec))
    keys = zip(matrix.nodes.tolist(), matrix.window_index.tolist())
    return np.array([i for i, k in enumerate(keys) if k in chosen], dtype=np.int64)


def stage_detect(state: RunState, write: bool = True) -> None:
    cfg = state.config.detector_config()
    for plane in ("gpu", "pipe", "os", "joint"):
        m = state.planes.get(plane)
        if m is None:
            continue
        train = training_rows(m, state.spec)
        for det in state.config.detectors:
            state.runs[(plane, det)] = run_detector(det, plane, m, train, cfg)
    if write:
        write_scores([r.scores for r in state.runs.values()], state.path("scores.csv"))


def stage_evaluate(state: RunState) -> None:
    cfg = state.config
    state.events = extract_weak_events(state.signature, cfg.q, cfg.min_run, cfg.pooled_quantile)
    rows = [evaluate_scores(state.events, r.scores, cfg.lookback, cfg.lead_mode)
            for r in state.runs.values()]
    state.table = compare_planes(rows, state.availability)
    write_report(state.table, state.path("report.csv"))
    write_events(state.events, state.table.rows, state.path("events.csv"))
    plot_average_lead(state.table, state.path("lead_avg.png"))


def load_records(state: RunState) -> None:
    cfg = state.config
    if not state.catalog_path:
        raise ValueError("no catalog given")
    rejected: list[str] = []
    records = parse_catalog(state.catalog_path, rejected)
    state.record_input(state.catalog_path)
    if cfg.category:
        records = filter_category(records, cfg.category)
    transitions: list[StateTransition]
    if state.transitions_path:
        transitions = parse_transitions(state.transitions_path)
        state.record_input(state.transitions_path)
    elif state.samples:
        transitions = transitions_from_samples(state.samples)
    else:
        raise ValueError("need a transitions file or archives carrying scheduler state")
    state.records = [refine_incident_time(r, transitions) for r in records]
    state.diagnostics["catalog"] = {
        "records": len(records), "rejected": rejected,
        "discarded": sum(r.discarded for r in state.records),
        "ambiguous": sum(r.ambiguous for r in state.records),
    }
    state.diagnostics["transitionCount"] = len(transitions)


def stage_refine(state: RunState) -> None:
    write_refined_catalog(state.records, state.path("refined_catalog.csv"))


def stage_forensics(state: RunState) -> None:
    cfg = state.config
    raw = build_node_series(state.samples, SliceSpec()) if state.samples else {}
    state.forensics = [
        analyze_incident(
            raw.get(r.node), r, state.archive_of.get(r.node, ""), cfg.scrape_interval, cfg.dropout,
            cfg.baseline_minutes, cfg.adjacent_minutes, cfg.adjacent_side,
        )
        for r in state.records
    ]
    write_alignment(state.forensics, state.path("alignment.csv"))
    write_summaries(state.forensics, state.path("forensic_summary.csv"))
    write_disappearance(state.forensics, state.path("disappearance.csv"))


def build_manifest(state: RunState, command: str) -> dict:
    cfg = state.config
    manifest: dict = {
        "tool": "gpuwarn",
        "version": __version__,
        "command": command,
        "runTimestamp": cfg.run_timestamp,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "decisions": cfg.decision_flags(),
        "inputs": dict(sorted(state.inputs.items())),
        "diagnostics": state.diagnostics,
    }
    if state.spec is not None:
        manifest["slice"] = state.spec.as_dict()
    manifest["detectors"] = state.config.detector_config().as_dict()
    if state.runs:
        manifest["models"] = {f"{p}/{d}": r.params for (p, d), r in state.runs.items()}
    if state.availability is not None:
        manifest["availability"] = state.availability.as_rows()
        manifest["planes"] = describe_planes(state.planes)
    if state.signature is not None and state.signature.missing_sources:
        manifest["signatureMissingSources"] = list(state.signature.missing_sources)
    if state.table is not None:
        manifest["omittedPlanes"] = [list(o) for o in state.table.omitted]
        manifest["weakEvents"] = len(state.events)
    if state.forensics:
        manifest["forensics"] = [
            {"node": f.incident.node, "status": f.status,
             "rule": f.alignment.rule if f.alignment else None,
             "t0Used": f.alignment.t0_used if f.alignment else None}
            for f in state.forensics
        ]
    manifest["outputs"] = sorted(set(state.outputs))
    return manifest


def write_manifest(state: RunState, command: str) -> Path:
    path = state.out / "manifest.json"
    text = json.dumps(build_manifest(state, command), indent=2, sort_keys=True, default=_jsonable)
    path.write_text(text + "\n")
    return path


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (set, frozenset, tuple)):
        return sorted(x)
    raise TypeError(f"not serializable: {type(x).__name__}")
