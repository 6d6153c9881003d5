"""Synthetic GPU-node telemetry with planted drift and detachment failures.

Every metric follows a shared per-node daily load cycle plus independent Gaussian
noise. Drift scenarios add a linear memory-temperature ramp ending at t0;
detachment scenarios keep all values nominal and drop the detached GPUs' metric
families from t0 on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import timedelta
from pathlib import Path

import numpy as np

from .catalog import IncidentRecord, StateTransition, format_ts, utc_date, write_catalog, write_transitions
from .features import (
    AMBIENT_TEMP,
    MEM_TEMP,
    SCRAPE_DURATION,
    SCRAPE_SAMPLES,
    SCRAPE_SUCCESS,
)
from .ingest import MetricSample, write_archive

REGIMES = ("nominal", "driftDominated", "detachment")
DAY = 86400
# 2025-03-03 00:00:50 UTC; scrapes land on xx:x0:50 like the production archives.
DEFAULT_START = 1740960050

GPU_METRICS = (
    MEM_TEMP,
    "DCGM_FI_DEV_GPU_TEMP",
    "DCGM_FI_DEV_POWER_USAGE",
    "DCGM_FI_DEV_GPU_UTIL",
    "DCGM_FI_DEV_SM_CLOCK",
    "DCGM_FI_DEV_MEM_CLOCK",
    "DCGM_FI_DEV_FB_USED",
)
OS_METRICS = ("node_load1", "node_load5", "node_load15", "node_memory_MemAvailable_bytes")

# (level, daily amplitude, noise sd)
DEFAULT_PROFILE: dict[str, tuple[float, float, float]] = {
    MEM_TEMP: (44.0, 1.5, 0.1),
    "DCGM_FI_DEV_GPU_TEMP": (38.0, 3.0, 0.2),
    "DCGM_FI_DEV_POWER_USAGE": (180.0, 60.0, 4.0),
    "DCGM_FI_DEV_GPU_UTIL": (55.0, 30.0, 3.0),
    "DCGM_FI_DEV_SM_CLOCK": (1410.0, 0.0, 5.0),
    "DCGM_FI_DEV_MEM_CLOCK": (1215.0, 0.0, 0.0),
    "DCGM_FI_DEV_FB_USED": (30000.0, 8000.0, 150.0),
    AMBIENT_TEMP: (22.0, 0.5, 0.03),
    "node_load1": (24.0, 10.0, 1.0),
    "node_load5": (24.0, 9.0, 0.5),
    "node_load15": (24.0, 8.0, 0.25),
    "node_memory_MemAvailable_bytes": (4.0e11, -6.0e10, 1.0e9),
    SCRAPE_DURATION: (0.35, 0.02, 0.01),
}
SAMPLES_PER_FAMILY = 14  # exporter series behind each tidy column

OK_CYCLE = ("idle", "alloc", "mix")


@dataclass(frozen=True)
class PlantedEvent:
    node: str
    t0: int
    drift_slope: float = 0.2  # degC per window (stride) on memory temperature
    onset_windows: int = 40
    detached_gpus: tuple[int, ...] = (0, 1, 2, 3)
    precursor_windows: int | None = None  # pipe degradation starts this many windows before the ramp
    precursor_payload_factor: float = 0.6
    precursor_duration_factor: float = 2.5
    detection_delay: int = 1800
    catalog_delay_days: int = 0


@dataclass(frozen=True)
class ScenarioSpec:
    regime: str = "nominal"
    n_nodes: int = 1
    gpus_per_node: int = 4
    duration: int = 7 * DAY
    cadence: int = 600
    start_time: int = DEFAULT_START
    events: tuple[PlantedEvent, ...] = ()
    noise: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    seed: int = 0
    baseline_horizon: int = 144
    window_length: int = 3600
    stride: int = 600

    @property
    def nodes(self) -> list[str]:
        return [f"sgpu{101 + i}" for i in range(self.n_nodes)]

    def profile(self) -> dict[str, tuple[float, float, float]]:
        return {**DEFAULT_PROFILE, **self.noise}

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "nominal" and self.events:
            raise ValueError("nominal scenarios carry no planted events")
        end = self.start_time + self.duration
        lead_in = self.baseline_horizon * self.stride + self.window_length
        for ev in self.events:
            if ev.node not in self.nodes:
                raise ValueError(f"event on unknown node {ev.node}")
            pre = 0
            if self.regime == "driftDominated":
                pre = (ev.onset_windows + (ev.precursor_windows or 0)) * self.stride
            if ev.t0 - pre - self.start_time < lead_in:
                raise ValueError(
                    f"event at {format_ts(ev.t0)} leaves less than {self.baseline_horizon} "
                    "windows of clean lead-in"
                )
            if not ev.t0 + ev.detection_delay < end:
                raise ValueError("event must lie strictly inside the generated span")
            if any(g >= self.gpus_per_node for g in ev.detached_gpus):
                raise ValueError("detached GPU index out of range")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        return d


def make_scenario(
    regime: str, seed: int = 0, n_nodes: int = 1, days: float = 7, t0: int | None = None,
    **event_kw,
) -> ScenarioSpec:
    """Scenario with one planted event on the first node (none for ``nominal``).

    Default t0: noon of day 3 for detachment, noon of day 4 for drift.
    """
    spec = ScenarioSpec(regime=regime, n_nodes=n_nodes, duration=int(days * DAY), seed=seed)
    if regime == "nominal":
        return spec
    if t0 is None:
        day = 2 if regime == "detachment" else 3
        t0 = (spec.start_time // DAY) * DAY + day * DAY + 12 * 3600
    return replace(spec, events=(PlantedEvent(spec.nodes[0], t0, **event_kw),))


@dataclass
class Scenario:
    spec: ScenarioSpec
    samples: list[MetricSample]
    transitions: list[StateTransition]
    catalog: list[IncidentRecord]
    truth: dict

    def samples_for(self, node: str) -> list[MetricSample]:
        return [s for s in self.samples if s.node == node]


def drift_excess(times: np.ndarray, ev: PlantedEvent, stride: int) -> np.ndarray:
    """Linear ramp from onset to t0, then a linear cooldown at the same rate."""
    onset = ev.t0 - ev.onset_windows * stride
    up = ev.drift_slope * (times - onset) / stride
    down = ev.drift_slope * (ev.onset_windows - (times - ev.t0) / stride)
    out = np.where(times < ev.t0, up, down)
    return np.where(times >= onset, np.maximum(out, 0.0), 0.0)


def _round(x: np.ndarray, metric: str) -> np.ndarray:
    if metric == SCRAPE_SAMPLES or metric.endswith("_CLOCK") or metric.endswith("_bytes"):
        return np.round(x)
    return np.round(x, 4)


def generate(spec: ScenarioSpec) -> Scenario:
    """Pure function of ``spec``: identical specs give identical samples and files."""
    spec.validate()
    profile = spec.profile()
    rng = np.random.default_rng(spec.seed)
    times = spec.start_time + spec.cadence * np.arange(spec.duration // spec.cadence, dtype=np.int64)
    samples: list[MetricSample] = []
    transitions: list[StateTransition] = []
    catalog: list[IncidentRecord] = []
    truth_events = []
    events_by_node = {e.node: e for e in spec.events}

    for node in spec.nodes:
        phase = rng.uniform(0, 2 * math.pi)
        ev = events_by_node.get(node)
        columns: list[tuple[str, tuple, np.ndarray, np.ndarray]] = []  # metric, labels, values, present

        def cycle(jitter: float = 0.0) -> np.ndarray:
            return np.sin(2 * math.pi * (times - spec.start_time) / DAY + phase + jitter)

        def series(metric: str, jitter: float = 0.0, offset: float = 0.0) -> np.ndarray:
            level, amp, sd = profile[metric]
            return level + offset + amp * cycle(jitter) + rng.normal(0.0, sd, len(times)) * (sd > 0)

        for g in range(spec.gpus_per_node):
            labels = (("gpu", str(g)),)
            jitter = rng.uniform(-0.2, 0.2)
            for metric in GPU_METRICS:
                offset = 0.6 * g if metric == MEM_TEMP else 0.0
                values = series(metric, jitter, offset)
                if metric == "DCGM_FI_DEV_GPU_UTIL":
                    values = np.clip(values, 0.0, 100.0)
                present = np.ones(len(times), dtype=bool)
                if ev is not None and spec.regime == "driftDominated" and metric == MEM_TEMP:
                    values = values + drift_excess(times, ev, spec.stride)
                if ev is not None and spec.regime == "detachment" and g in ev.detached_gpus:
                    present = times < ev.t0
                columns.append((metric, labels, values, present))

        columns.append((AMBIENT_TEMP, (), series(AMBIENT_TEMP), np.ones(len(times), dtype=bool)))
        for metric in OS_METRICS:
            values = np.maximum(series(metric), 0.0)
            columns.append((metric, (), values, np.ones(len(times), dtype=bool)))

        n_families = np.sum([p for _m, _l, _v, p in columns], axis=0) + 3
        payload = n_families * SAMPLES_PER_FAMILY + rng.integers(-5, 6, len(times))
        duration = np.maximum(series(SCRAPE_DURATION), 0.05)
        if ev is not None and ev.precursor_windows and spec.regime == "driftDominated":
            start = ev.t0 - (ev.onset_windows + ev.precursor_windows) * spec.stride
            degraded = (times >= start) & (times < ev.t0)
            payload = np.where(degraded, payload * ev.precursor_payload_factor, payload)
            duration = np.where(degraded, duration * ev.precursor_duration_factor, duration)
        ones = np.ones(len(times), dtype=bool)
        columns.append((SCRAPE_DURATION, (), duration, ones))
        columns.append((SCRAPE_SAMPLES, (), payload.astype(float), ones))
        columns.append((SCRAPE_SUCCESS, (), np.ones(len(times)), ones))

        columns.sort(key=lambda c: (c[0], c[1]))
        rounded = [(m, lab, _round(v, m), p) for m, lab, v, p in columns]
        for i, t in enumerate(times.tolist()):
            for metric, labels, values, present in rounded:
                if present[i]:
                    samples.append(MetricSample(t, node, metric, labels, float(values[i])))

        node_transitions, state = _benign_transitions(node, times, rng, ev)
        transitions.extend(node_transitions)
        if ev is not None:
            fail_at = ev.t0 + ev.detection_delay if spec.regime == "detachment" else ev.t0
            transitions.append(StateTransition(node, int(fail_at), state, "drain"))
            category = "gpu fell off bus" if spec.regime == "detachment" else "gpu error/problem"
            catalog.append(IncidentRecord(
                node=node,
                catalog_date=utc_date(int(fail_at)) + timedelta(days=ev.catalog_delay_days),
                description="gpus dropped off bus" if spec.regime == "detachment" else "gpu thermal drift",
                category=category, before_hours=24, after_hours=2,
            ))
            entry = {
                "node": node, "t0": ev.t0, "t0Utc": format_ts(ev.t0),
                "transitionTime": int(fail_at), "category": category,
            }
            if spec.regime == "detachment":
                entry["detachedGpus"] = list(ev.detached_gpus)
                entry["detachedFamilies"] = [
                    [m, f"gpu={g}"] for g in ev.detached_gpus for m in GPU_METRICS
                ]
            else:
                entry["rampOnset"] = ev.t0 - ev.onset_windows * spec.stride
                entry["rampSlopePerWindow"] = ev.drift_slope
                entry["cooldownEnd"] = ev.t0 + ev.onset_windows * spec.stride
                if ev.precursor_windows:
                    entry["precursorStart"] = ev.t0 - (ev.onset_windows + ev.precursor_windows) * spec.stride
            truth_events.append(entry)

    transitions.sort(key=lambda t: (t.timestamp, t.node))
    truth = {
        "regime": spec.regime, "seed": spec.seed, "nodes": spec.nodes,
        "startTime": int(times[0]), "endTime": int(times[-1]), "cadence": spec.cadence,
        "sampleCount": len(samples), "events": truth_events,
    }
    return Scenario(spec, samples, transitions, catalog, truth)


def _benign_transitions(node, times, rng, ev) -> tuple[list[StateTransition], str]:
    """OK -> OK scheduler churn every few hours, stopping before any failure."""
    stop = int(times[-1]) if ev is None else ev.t0 - 3600
    out, state, t = [], "idle", int(times[0])
    while True:
        t += int(rng.integers(3, 9)) * 3600
        if t >= stop:
            break
        nxt = OK_CYCLE[(OK_CYCLE.index(state) + 1) % len(OK_CYCLE)]
        out.append(StateTransition(node, t, state, nxt))
        state = nxt
    return out, state


def write_scenario(scenario: Scenario, out_dir: str | Path, compress: bool = True) -> dict[str, Path]:
    """Write per-node tidy archives, transitions, catalog and the ground-truth manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    slug = {"nominal": "nominal", "driftDominated": "thermal-drift",
            "detachment": "gpus-fallen-off-bus"}[scenario.spec.regime]
    day = utc_date(scenario.spec.start_time).isoformat()
    by_node: dict[str, list[MetricSample]] = {n: [] for n in scenario.spec.nodes}
    for s in scenario.samples:
        by_node[s.node].append(s)
    for node, rows in by_node.items():
        name = f"{node}_{day}_{slug}_tidy.csv" + (".bz2" if compress else "")
        write_archive(rows, out / name)
        paths[f"archive:{node}"] = out / name
    write_transitions(scenario.transitions, out / "transitions.csv")
    write_catalog(scenario.catalog, out / "catalog.csv")
    truth = {**scenario.truth, "spec": scenario.spec.as_dict()}
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    paths["transitions"] = out / "transitions.csv"
    paths["catalog"] = out / "catalog.csv"
    paths["truth"] = out / "ground_truth.json"
    return paths
