import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuwarn.detectors import ScoreSeries
from gpuwarn.evaluation import (
    REPORT_HEADER,
    EvaluationRow,
    WeakEvent,
    alert_run_stats,
    compare_planes,
    compute_lead_time,
    evaluate_scores,
    extract_weak_events,
    plot_average_lead,
    true_runs,
    write_events,
    write_report,
)
from gpuwarn.features import AvailabilityMatrix, PlaneAvailability, SignatureMatrix

from . import oracles


def sig(scalar, nodes=None) -> SignatureMatrix:
    scalar = np.asarray(scalar, dtype=float)
    n = len(scalar)
    nodes = np.full(n, "n1", dtype=object) if nodes is None else np.asarray(nodes, dtype=object)
    idx = np.concatenate([np.arange(np.sum(nodes == u)) for u in dict.fromkeys(nodes)])
    return SignatureMatrix(nodes, idx, 600 * idx, np.empty((n, 16)), scalar, scalar, None)


def alerts(flags, nodes=None, plane="gpu", detector="isolation-forest") -> ScoreSeries:
    flags = np.asarray(flags, dtype=bool)
    n = len(flags)
    nodes = np.full(n, "n1", dtype=object) if nodes is None else np.asarray(nodes, dtype=object)
    idx = np.concatenate([np.arange(np.sum(nodes == u)) for u in dict.fromkeys(nodes)])
    raw = flags.astype(float)
    return ScoreSeries(detector, plane, nodes, idx, 600 * idx, raw, raw, flags, 0.5, 0.01)


def ev(start, end=None, node="n1") -> WeakEvent:
    return WeakEvent(node, start, start if end is None else end, 600 * start, 1.0, 0.0)


def padded(core, n=1000):
    """Core pattern embedded in a long flat series so the 0.99 quantile stays at 0."""
    return np.concatenate([np.zeros(n), core])


def test_minimal_qualifying_run():
    s = padded([0, 0, 5, 5, 5, 0])
    (e,) = extract_weak_events(sig(s))
    assert (e.start_window, e.length) == (1002, 3)


def test_short_run_rejected():
    assert extract_weak_events(sig(padded([0, 5, 5, 0]))) == []


def test_planted_excursions_recovered():
    s = np.zeros(2000)
    planted = [(100, 2), (200, 3), (300, 4), (400, 3), (500, 1)]
    for start, length in planted:
        s[start:start + length] = 9.0
    got = [(e.start_window, e.end_window) for e in extract_weak_events(sig(s))]
    assert got == [(200, 202), (300, 303), (400, 402)]
    assert got == oracles.weak_events(s.tolist(), 0.99, 3)


def test_missing_window_breaks_run():
    s = padded([5, 5, np.nan, 5, 5, 5])
    (e,) = extract_weak_events(sig(s))
    assert e.start_window == 1003


def test_threshold_is_per_node():
    hot = np.concatenate([np.full(300, 10.0), [50, 50, 50]])
    cool = np.concatenate([np.zeros(300), [5, 5, 5]])
    s = sig(np.concatenate([hot, cool]), ["a"] * 303 + ["b"] * 303)
    assert sorted(e.node for e in extract_weak_events(s)) == ["a", "b"]
    pooled = extract_weak_events(s, pooled=True)
    assert [e.node for e in pooled] == ["a"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=20, max_size=300), st.integers(1, 5))
def test_events_match_oracle_and_invariants(xs, min_run):
    events = extract_weak_events(sig(xs), min_run=min_run)
    assert [(e.start_window, e.end_window) for e in events] == oracles.weak_events(xs, 0.99, min_run)
    for a, b in zip(events, events[1:]):
        assert a.end_window + 1 < b.start_window  # maximal: never touching
    for e in events:
        assert e.length >= min_run
        assert all(xs[i] > e.threshold for i in range(e.start_window, e.end_window + 1))


def test_lead_arithmetic():
    a = np.zeros(100, dtype=bool)
    a[10] = True
    st_ = compute_lead_time([ev(15)], alerts(a))
    assert st_.leads == (5,) and st_.avg == 5


def test_lead_miss_is_zero():
    a = np.zeros(100, dtype=bool)
    a[90] = True  # after the event
    st_ = compute_lead_time([ev(60)], alerts(a))
    assert st_.leads == (0,) and st_.detected == (False,)


def test_alert_at_event_start_is_lead_zero_detected():
    a = np.zeros(20, dtype=bool)
    a[7] = True
    st_ = compute_lead_time([ev(7)], alerts(a))
    assert st_.leads == (0,) and st_.detected == (True,)


def test_lookback_horizon():
    a = np.zeros(200, dtype=bool)
    a[100 - 48] = True
    assert compute_lead_time([ev(100)], alerts(a)).leads == (48,)
    a[:] = False
    a[100 - 49] = True
    assert compute_lead_time([ev(100)], alerts(a)).leads == (0,)


def test_lead_modes_and_empty():
    a = np.zeros(100, dtype=bool)
    a[40] = True
    evs = [ev(50), ev(90)]
    inc = compute_lead_time(evs, alerts(a), mode="include-zero")
    exc = compute_lead_time(evs, alerts(a), mode="exclude")
    assert (inc.avg, inc.median, inc.max) == (5.0, 5.0, 10.0)
    assert (exc.avg, exc.median, exc.max) == (10.0, 10.0, 10.0)
    none = compute_lead_time([], alerts(a))
    assert none.no_events and none.avg is None
    with pytest.raises(ValueError):
        compute_lead_time(evs, alerts(a), mode="other")


def test_alerts_on_other_node_ignored():
    a = np.array([True] + [False] * 9 + [False] * 10)
    s = alerts(a, ["a"] * 10 + ["b"] * 10)
    assert compute_lead_time([ev(5, node="b")], s).leads == (0,)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=150), st.lists(st.integers(0, 149), max_size=6),
       st.integers(0, 60))
def test_leads_match_oracle_and_bounds(flags, starts, lookback):
    a = np.array(flags)
    fired = np.flatnonzero(a).tolist()
    starts = [s for s in starts if s < len(flags)]
    st_ = compute_lead_time([ev(s) for s in starts], alerts(a), lookback)
    assert list(st_.leads) == [oracles.lead(fired, s, lookback) for s in starts]
    assert all(0 <= x <= lookback for x in st_.leads)


def test_run_stats_by_hand():
    assert alert_run_stats(alerts([1, 1, 0, 1])) == (2, 1.5)
    assert alert_run_stats(alerts([0, 0, 0])) == (0, None)


def test_runs_do_not_cross_nodes():
    s = alerts([0, 1, 1, 1, 1, 0], ["a", "a", "a", "b", "b", "b"])
    assert alert_run_stats(s) == (2, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_run_accounting(flags):
    runs = true_runs(np.array(flags))
    assert sum(b - a + 1 for a, b in runs) == sum(flags)
    count, avg = alert_run_stats(alerts(flags))
    assert count == len(runs)
    if count:
        assert avg == pytest.approx(sum(flags) / count)


def availability(*missing):
    return AvailabilityMatrix(tuple(
        PlaneAvailability("all", p, p not in missing, 0 if p in missing else 5,
                          "no source columns" if p in missing else "")
        for p in ("gpu", "pipe", "os", "joint")
    ))


def rows_for(planes, dets=("z-score", "isolation-forest", "one-class-svm")):
    a = np.zeros(50, dtype=bool)
    a[[3, 4, 20]] = True
    out = []
    for p in planes:
        for d in dets:
            out.append(evaluate_scores([ev(10), ev(30)], alerts(a, plane=p, detector=d)))
    return out


def test_compare_cross_product():
    t = compare_planes(rows_for(["gpu", "joint"]), availability("pipe", "os"))
    assert len(t.rows) == 6
    assert [r.plane for r in t.rows] == ["gpu"] * 3 + ["joint"] * 3


def test_unavailable_plane_omitted_not_zeroed():
    t = compare_planes(rows_for(["gpu", "pipe", "joint"]), availability("pipe"))
    assert "pipe" not in {r.plane for r in t.rows}
    reasons = dict(t.omitted)
    assert reasons["pipe"].startswith("plane unavailable")


def test_report_csv(tmp_path):
    t = compare_planes(rows_for(["gpu"]), availability("pipe", "os"))
    p = tmp_path / "report.csv"
    write_report(t, p)
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == REPORT_HEADER
    assert lines[1].startswith("GPU,z-score,")
    # earliest alert 3 precedes both events: leads 7 and 27
    assert lines[2].split(",")[2:] == ["17.000", "17.0", "27.0", "1.500", "2"]


def test_report_blank_when_no_events(tmp_path):
    row = evaluate_scores([], alerts([0, 1, 0]))
    p = tmp_path / "r.csv"
    write_report(compare_planes([row], availability()), p)
    assert p.read_text().splitlines()[1].split(",")[2:] == ["", "", "", "1.000", "1"]


def test_events_csv_and_plot(tmp_path):
    rows = rows_for(["gpu", "joint"], ("isolation-forest",))
    write_events([ev(10), ev(30)], rows, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "node,startWindow,startTime,length,lead,detector,plane"
    assert len(lines) == 5
    plot_average_lead(compare_planes(rows, availability()), tmp_path / "lead.png")
    assert (tmp_path / "lead.png").read_bytes()[:4] == b"\x89PNG"


def test_row_dict_keeps_absent_values_absent():
    d = EvaluationRow("gpu", "z-score", compute_lead_time([], alerts([0])), 0, None, 0.0, None).as_dict()
    assert d["avgLead"] is None and d["avgRunLen"] is None
