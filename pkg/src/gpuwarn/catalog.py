"""Operator incident catalog and scheduler-transition based incident time refinement."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import MetricSample

logger = logging.getLogger(__name__)

CATALOG_HEADER = ["node", "date", "description", "category", "beforeHours", "afterHours"]
TRANSITIONS_HEADER = ["node", "timestamp", "fromState", "toState"]
REFINED_HEADER = CATALOG_HEADER + ["refinedT0", "collectStart", "collectEnd", "status"]

OK_STATES = frozenset({"idle", "alloc", "mix"})
FAILURE_STATES = frozenset({"drain", "draining", "down", "no response", "rebooting"})

# Archive-embedded scheduler state: one-hot series, label ``state`` names the state.
STATE_METRIC = "slurm_node_state"

PRIOR_DAYS = 3


def normalize_state(state: str) -> str:
    return " ".join(state.strip().lower().split())


def is_ok(state: str) -> bool:
    return normalize_state(state) in OK_STATES


def is_failure(state: str) -> bool:
    return normalize_state(state) in FAILURE_STATES


def day_start(d: date) -> int:
    return int(datetime(d.year, d.month, d.day, tzinfo=timezone.utc).timestamp())


def utc_date(ts: int) -> date:
    return datetime.fromtimestamp(ts, tz=timezone.utc).date()


def format_ts(ts: int | None) -> str:
    if ts is None:
        return ""
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")


@dataclass(frozen=True)
class StateTransition:
    node: str
    timestamp: int
    from_state: str
    to_state: str

    @property
    def ok_to_failure(self) -> bool:
        return is_ok(self.from_state) and is_failure(self.to_state)


@dataclass(frozen=True)
class IncidentRecord:
    node: str
    catalog_date: date
    description: str
    category: str
    before_hours: float
    after_hours: float
    refined_t0: int | None = None
    status: str = "unrefined"  # unrefined | refined | discarded
    rule: str = ""  # sameDay | prior3Days when refined
    ambiguous: bool = False

    @property
    def collect_start(self) -> int | None:
        if self.refined_t0 is None:
            return None
        return int(round(self.refined_t0 - self.before_hours * 3600))

    @property
    def collect_end(self) -> int | None:
        if self.refined_t0 is None:
            return None
        return int(round(self.refined_t0 + self.after_hours * 3600))

    @property
    def discarded(self) -> bool:
        return self.status == "discarded"


def parse_catalog(path: str | Path, rejected: list[str] | None = None) -> list[IncidentRecord]:
    """Rows with an unparseable date or bound are rejected (and listed in ``rejected``)."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != CATALOG_HEADER:
            raise ValueError(f"{path}: unexpected catalog header {reader.fieldnames!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                d = date.fromisoformat(row["date"].strip())
                before = float(row["beforeHours"])
                after = float(row["afterHours"])
                if before < 0 or after < 0:
                    raise ValueError("negative collection bound")
            except (ValueError, TypeError, AttributeError) as exc:
                msg = f"line {lineno}: {exc}"
                logger.warning("%s: rejected catalog row, %s", path, msg)
                if rejected is not None:
                    rejected.append(msg)
                continue
            records.append(IncidentRecord(
                node=row["node"].strip(), catalog_date=d,
                description=row["description"], category=row["category"],
                before_hours=before, after_hours=after,
            ))
    return records


def filter_category(records: Iterable[IncidentRecord], pattern: str) -> list[IncidentRecord]:
    rx = re.compile(pattern, re.IGNORECASE)
    return [r for r in records if rx.search(r.category)]


def parse_transitions(path: str | Path) -> list[StateTransition]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != TRANSITIONS_HEADER:
            raise ValueError(f"{path}: unexpected transitions header {reader.fieldnames!r}")
        for row in reader:
            out.append(StateTransition(
                row["node"].strip(), int(float(row["timestamp"])),
                row["fromState"], row["toState"],
            ))
    out.sort(key=lambda t: t.timestamp)  # stable: input order kept for equal timestamps
    return out


def write_transitions(transitions: Iterable[StateTransition], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRANSITIONS_HEADER)
        for t in transitions:
            writer.writerow([t.node, t.timestamp, t.from_state, t.to_state])


def transitions_from_samples(samples: Iterable[MetricSample]) -> list[StateTransition]:
    """Derive transitions from a one-hot ``slurm_node_state{state=...}`` metric family."""
    by_node: dict[str, dict[int, tuple[float, str]]] = {}
    for s in samples:
        if s.metric != STATE_METRIC:
            continue
        state = dict(s.labels).get("state")
        if state is None:
            continue
        slot = by_node.setdefault(s.node, {})
        best = slot.get(s.timestamp)
        if best is None or s.value > best[0]:
            slot[s.timestamp] = (s.value, state)
    out = []
    for node in sorted(by_node):
        prev = None
        for ts in sorted(by_node[node]):
            value, state = by_node[node][ts]
            if value <= 0:
                continue
            if prev is not None and normalize_state(state) != normalize_state(prev):
                out.append(StateTransition(node, ts, prev, state))
            prev = state
    out.sort(key=lambda t: t.timestamp)
    return out


def refine_incident_time(
    record: IncidentRecord, transitions: Sequence[StateTransition]
) -> IncidentRecord:
    """Pin the incident to an OK -> failure scheduler transition.

    First such transition on the catalog day (UTC) wins; otherwise the last one
    in the three calendar days before it; otherwise the record is discarded.
    """
    day0 = day_start(record.catalog_date)
    day1 = day0 + 86400
    prior0 = day0 - PRIOR_DAYS * 86400
    edges = [t for t in transitions if t.node == record.node and t.ok_to_failure]

    same_day = [t for t in edges if day0 <= t.timestamp < day1]
    if same_day:
        first = min(t.timestamp for t in same_day)
        tied = sum(t.timestamp == first for t in same_day) > 1
        return replace(record, refined_t0=first, status="refined", rule="sameDay", ambiguous=tied)

    prior = [t for t in edges if prior0 <= t.timestamp < day0]
    if prior:
        last = max(t.timestamp for t in prior)
        tied = sum(t.timestamp == last for t in prior) > 1
        return replace(record, refined_t0=last, status="refined", rule="prior3Days", ambiguous=tied)

    return replace(record, refined_t0=None, status="discarded", rule="", ambiguous=False)


def write_refined_catalog(records: Iterable[IncidentRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REFINED_HEADER)
        for r in records:
            writer.writerow([
                r.node, r.catalog_date.isoformat(), r.description, r.category,
                _num(r.before_hours), _num(r.after_hours),
                "" if r.refined_t0 is None else r.refined_t0,
                "" if r.collect_start is None else r.collect_start,
                "" if r.collect_end is None else r.collect_end,
                "discarded" if r.discarded else "refined",
            ])


def write_catalog(records: Iterable[IncidentRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CATALOG_HEADER)
        for r in records:
            writer.writerow([
                r.node, r.catalog_date.isoformat(), r.description, r.category,
                _num(r.before_hours), _num(r.after_hours),
            ])


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))
