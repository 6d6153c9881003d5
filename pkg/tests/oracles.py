"""Slow, loop-based reference implementations used as test oracles.

None of these import from the package under test; they are written from the
definitions so that agreement means something.
"""

from __future__ import annotations

import math
import statistics


def nearest_rank(values, q):
    v = sorted(values)
    k = math.ceil(q * len(v) - 1e-9)
    return v[max(k, 1) - 1]


def budget_alerts(scores, budget):
    thr = nearest_rank(scores, 1.0 - budget)
    return [s > thr for s in scores]


def trailing_mean(xs, window):
    out = []
    for i in range(len(xs)):
        chunk = [x for x in xs[max(0, i - window + 1): i + 1] if x == x]
        out.append(sum(chunk) / len(chunk) if chunk else float("nan"))
    return out


def window_aggregates(points, start, length, min_samples=2):
    """points: list of (t, v). Returns dict of mean/std/min/max/slope or None."""
    inside = [(t, v) for t, v in points if start <= t < start + length and v == v]
    if len(inside) < min_samples:
        return None
    ts = [t for t, _ in inside]
    vs = [v for _, v in inside]
    n = len(vs)
    mean = sum(vs) / n
    var = sum((v - mean) ** 2 for v in vs) / n
    tm = sum(ts) / n
    sxx = sum((t - tm) ** 2 for t in ts)
    sxy = sum((t - tm) * (v - mean) for t, v in inside)
    return {
        "mean": mean, "std": math.sqrt(var), "min": min(vs), "max": max(vs),
        "slope": sxy / sxx if sxx > 0 else 0.0,
    }


def robust_center_scale(xs):
    xs = [x for x in xs if x == x]
    med = statistics.median(xs)
    mad = statistics.median([abs(x - med) for x in xs])
    scale = 1.4826 * mad
    if scale == 0:
        scale = max(statistics.pstdev(xs), 1e-9)
    return med, scale


def weak_events(signature, q, min_run):
    """(start, end) inclusive index pairs of runs above the nearest-rank q quantile."""
    present = [s for s in signature if s == s]
    thr = nearest_rank(present, q)
    events, start = [], None
    for i, s in enumerate(signature + [float("nan")]):
        above = s == s and s > thr
        if above and start is None:
            start = i
        elif not above and start is not None:
            if i - start >= min_run:
                events.append((start, i - 1))
            start = None
    return events


def lead(alert_indices, event_start, lookback):
    inside = [a for a in alert_indices if event_start - lookback <= a <= event_start]
    return event_start - min(inside) if inside else 0


def interval_shift(timeline, values, t0, baseline_s, adjacent_s, side="before"):
    """(delta, diffStd) of a column between baseline and adjacent intervals."""
    base = [v for t, v in zip(timeline, values) if t0 - baseline_s <= t < t0 and v == v]
    if side == "before":
        adj = [v for t, v in zip(timeline, values) if t0 - adjacent_s < t <= t0 and v == v]
    else:
        adj = [v for t, v in zip(timeline, values) if t0 <= t <= t0 + adjacent_s and v == v]
    mb, ma = sum(base) / len(base), sum(adj) / len(adj)
    return ma - mb, statistics.pstdev(adj) - statistics.pstdev(base)


def c_factor(n):
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    h = sum(1.0 / i for i in range(1, n))  # harmonic number H(n-1)
    return 2.0 * h - 2.0 * (n - 1) / n


def trailing_median(xs, horizon, min_count):
    out = []
    for i in range(len(xs)):
        prior = [x for x in xs[max(0, i - horizon): i] if x == x]
        out.append(statistics.median(prior) if len(prior) >= min_count else float("nan"))
    return out


def ols_slope(ys):
    n = len(ys)
    xm = (n - 1) / 2
    ym = sum(ys) / n
    return sum((i - xm) * (y - ym) for i, y in enumerate(ys)) / sum((i - xm) ** 2 for i in range(n))
