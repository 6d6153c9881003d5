import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpuwarn.detectors import (
    DetectorConfig,
    ScoreSeries,
    apply_budget,
    learning_input,
    nearest_rank,
    run_detector,
    score_isolation_forest,
    score_one_class_svm,
    score_robust_z,
    smooth_scores,
    trailing_mean,
    train_isolation_forest,
    train_one_class_svm,
    write_scores,
)
from gpuwarn.detectors.iforest import average_path_length
from gpuwarn.features import FeatureColumn, WindowFeatureMatrix, fit_robust_scaler

from . import oracles


def matrix(values, nodes=None) -> WindowFeatureMatrix:
    values = np.asarray(values, dtype=float)
    n, d = values.shape
    nodes = np.full(n, "n1", dtype=object) if nodes is None else np.asarray(nodes, dtype=object)
    cols = tuple(FeatureColumn("os", f"f{j}", (), "mean") for j in range(d))
    return WindowFeatureMatrix(nodes, np.arange(n), 600 * np.arange(n), cols, values)


def series(raw, nodes=None) -> ScoreSeries:
    raw = np.asarray(raw, dtype=float)
    nodes = np.full(len(raw), "n1", dtype=object) if nodes is None else np.asarray(nodes, dtype=object)
    return ScoreSeries("z-score", "os", nodes, np.arange(len(raw)), 600 * np.arange(len(raw)), raw)


# robust z

def test_center_window_scores_zero():
    x = np.random.default_rng(0).normal(size=(200, 4))
    sc = fit_robust_scaler(x)
    m = matrix(np.vstack([x, sc.center]))
    assert score_robust_z(m, sc).raw[-1] == 0.0


def test_single_channel_excursion_scores_ten():
    x = np.random.default_rng(1).normal(size=(200, 4))
    sc = fit_robust_scaler(x)
    probe = sc.center.copy()
    probe[2] += 10 * sc.scale[2]
    assert score_robust_z(matrix(np.vstack([x, probe])), sc).raw[-1] == pytest.approx(10.0)


def test_fully_missing_window_is_missing():
    x = np.random.default_rng(2).normal(size=(50, 3))
    x[7] = np.nan
    m = matrix(x)
    assert np.isnan(score_robust_z(m, fit_robust_scaler(x)).raw[7])


def test_normal_matrix_p99_matches_monte_carlo_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((10_000, 16))
    raw = score_robust_z(matrix(x), fit_robust_scaler(x)).raw
    # max of 16 iid |z|: P(max <= t) = (2 Phi(t) - 1) ** 16
    closed = NormalDist().inv_cdf((1 + 0.99 ** (1 / 16)) / 2)
    sim = np.abs(np.random.default_rng(6).standard_normal((200_000, 16))).max(axis=1)
    assert np.quantile(raw, 0.99) == pytest.approx(closed, rel=0.03)
    assert np.quantile(sim, 0.99) == pytest.approx(closed, rel=0.01)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 50), st.floats(-100, 100))
def test_robust_z_ordering_affine_invariant(seed, a, b):
    x = np.random.default_rng(seed).normal(size=(120, 3))
    y = a * x + b
    s1 = score_robust_z(matrix(x), fit_robust_scaler(x)).raw
    s2 = score_robust_z(matrix(y), fit_robust_scaler(y)).raw
    assert np.allclose(s1, s2, rtol=1e-7, atol=1e-9)
    assert np.argmax(s1) == np.argmax(s2)


# smoothing and budget

def test_trailing_mean_matches_oracle():
    x = np.random.default_rng(0).normal(size=40)
    x[[3, 17]] = np.nan
    assert np.allclose(trailing_mean(x, 5), oracles.trailing_mean(x.tolist(), 5), equal_nan=True)


def test_trailing_mean_shorter_at_start():
    assert trailing_mean(np.array([1.0, 3.0, 5.0, 7.0, 9.0, 11.0]), 5).tolist() == [1, 2, 3, 4, 5, 7]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(-1e3, 1e3), st.integers(1, 8))
def test_smoothing_linearity(xs, c, w):
    x = np.array(xs)
    assert np.allclose(trailing_mean(np.full(len(x), c), w), c)
    assert np.allclose(trailing_mean(x + c, w), trailing_mean(x, w) + c, atol=1e-8)


def test_smoothing_respects_node_boundaries():
    s = smooth_scores(series([1, 1, 1, 100, 100], ["a", "a", "a", "b", "b"]), 5)
    assert s.smooth.tolist() == [1, 1, 1, 100, 100]


def test_budget_exact_on_distinct_scores():
    s = smooth_scores(series(np.random.default_rng(0).permutation(1000).astype(float)), 1)
    out = apply_budget(s, 0.01)
    assert out.alert.sum() == 10
    assert out.threshold == nearest_rank(s.smooth, 0.99)


def test_budget_all_tied(caplog):
    out = apply_budget(smooth_scores(series(np.ones(100)), 5), 0.01)
    assert out.alert.sum() == 0
    assert out.warnings and "identical" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=300), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
def test_budget_bound_and_oracle(xs, budget):
    s = smooth_scores(series(np.array(xs, dtype=float)), 1)
    out = apply_budget(s, budget)
    n = len(xs)
    assert out.alert.sum() / n <= budget + 1e-12
    assert out.alert.tolist() == oracles.budget_alerts([float(v) for v in xs], budget)
    ties = max(np.unique(xs, return_counts=True)[1])
    assert out.alert.sum() / n >= budget - (ties + 1) / n


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=5, max_size=60), st.data())
def test_monotone_alert_consistency(xs, data):
    smooth = np.array(xs)
    thr = float(np.quantile(smooth, 0.8))
    i = data.draw(st.integers(0, len(xs) - 1))
    bumped = smooth.copy()
    bumped[i] += data.draw(st.floats(0, 100))
    before = smooth > thr
    after = bumped > thr
    mask = np.arange(len(xs)) != i
    assert np.array_equal(before[mask], after[mask])
    assert after[i] >= before[i]


def test_nearest_rank_matches_oracle():
    v = np.random.default_rng(0).normal(size=333)
    for q in (0.01, 0.5, 0.9, 0.99, 1.0):
        assert nearest_rank(v, q) == oracles.nearest_rank(v.tolist(), q)


def test_per_node_threshold():
    raw = np.concatenate([np.arange(100.0), 1000 + np.arange(100.0)])
    nodes = ["a"] * 100 + ["b"] * 100
    s = smooth_scores(series(raw, nodes), 1)
    glob = apply_budget(s, 0.05)
    per = apply_budget(s, 0.05, per_node=True)
    assert glob.alert[:100].sum() == 0
    assert per.alert[:100].sum() == 5 and per.alert[100:].sum() == 5


def test_budget_range_checked():
    with pytest.raises(ValueError):
        apply_budget(series([1.0, 2.0]), 0.0)


# isolation forest

def test_c_factor_against_harmonic_oracle():
    for n in (2, 3, 10, 64, 65, 256, 1000):
        assert float(average_path_length(n)) == pytest.approx(oracles.c_factor(n), abs=1e-9)
    assert float(average_path_length(1)) == 0.0


def test_forest_isolates_far_point():
    x = np.vstack([np.zeros((30, 2)), [[50.0, 50.0]]])
    model = train_isolation_forest(x, 50, 256, seed=3)
    s = score_isolation_forest(model, x)
    assert s[-1] > s[0]


def test_forest_height_limit_and_range():
    x = np.random.default_rng(0).normal(size=(600, 3))
    model = train_isolation_forest(x, 20, 256, seed=0)
    assert all(t.height <= math.ceil(math.log2(256)) for t in model.trees)
    s = score_isolation_forest(model, x)
    assert np.all((s > 0) & (s <= 1))


def test_forest_seeded_determinism():
    x = np.random.default_rng(0).normal(size=(300, 4))
    a = score_isolation_forest(train_isolation_forest(x, 30, 128, seed=9), x)
    b = score_isolation_forest(train_isolation_forest(x, 30, 128, seed=9), x)
    assert a.tobytes() == b.tobytes()


def test_forest_constant_matrix_scores_half():
    x = np.ones((40, 3))
    s = score_isolation_forest(train_isolation_forest(x, 10, 256, seed=0), x)
    assert np.allclose(s, 0.5)


def test_forest_rejects_missing():
    with pytest.raises(ValueError):
        train_isolation_forest(np.array([[1.0], [np.nan]]))


# one-class SVM

def test_svm_dual_feasible_and_oriented():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 2))
    model = train_one_class_svm(x, nu=0.1)
    assert model.converged
    assert model.alpha.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(model.alpha <= 1 / (0.1 * 400) + 1e-12)
    s = score_one_class_svm(model, np.array([[0.0, 0.0], [10.0, 10.0]]))
    assert s[0] < s[1]


def test_svm_nu_property():
    x = np.random.default_rng(1).normal(size=(1000, 3))
    model = train_one_class_svm(x, nu=0.05)
    frac = float((score_one_class_svm(model, x) > 0).mean())
    assert frac <= 0.05 + 0.02


def test_svm_duplicates_score_identically():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(size=(100, 2))] * 2)
    s = score_one_class_svm(train_one_class_svm(x), x)
    assert np.array_equal(s[:100], s[100:])


def test_svm_training_cap_is_seeded():
    x = np.random.default_rng(3).normal(size=(500, 2))
    a = train_one_class_svm(x, max_train=200, seed=4)
    b = train_one_class_svm(x, max_train=200, seed=4)
    assert np.array_equal(a.support, b.support) and a.rho == b.rho
    assert len(a.alpha) <= 200


def test_svm_iteration_cap_reported(caplog):
    x = np.random.default_rng(4).normal(size=(300, 2))
    model = train_one_class_svm(x, max_iter=3)
    assert not model.converged and "iterations" in caplog.text


# orchestration

def test_learning_input_imputes_and_flags():
    x = np.random.default_rng(0).normal(size=(20, 3))
    x[5, 1] = np.nan
    x[6] = np.nan
    m = matrix(x)
    sc = fit_robust_scaler(x)
    li = learning_input(m, sc)
    assert li.shape == (20, 4)
    assert li[5, 1] == 0.0 and li[5, 3] == pytest.approx(1 / 3)
    assert li[6].tolist() == [0.0, 0.0, 0.0, 1.0]


@pytest.mark.parametrize("name", ["z-score", "isolation-forest", "one-class-svm"])
def test_dominating_window_scores_high(name):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(300, 4))
    probe = np.median(x, axis=0) + 10 * 1.4826 * np.median(np.abs(x - np.median(x, axis=0)), axis=0)
    m = matrix(np.vstack([x, probe]))
    cfg = DetectorConfig(smooth_window=1, if_trees=50)
    run = run_detector(name, "os", m, np.arange(300), cfg)
    assert run.scores.raw[-1] > np.median(run.scores.raw[:300])
    assert run.params["threshold"] == run.scores.threshold


@pytest.mark.parametrize("name", ["isolation-forest", "one-class-svm"])
def test_learning_detectors_deterministic(name):
    x = np.random.default_rng(8).normal(size=(250, 3))
    m = matrix(x)
    a = run_detector(name, "os", m, np.arange(250), DetectorConfig(seed=5, if_trees=20))
    b = run_detector(name, "os", m, np.arange(250), DetectorConfig(seed=5, if_trees=20))
    assert a.scores.raw.tobytes() == b.scores.raw.tobytes()


def test_unknown_detector():
    with pytest.raises(ValueError):
        run_detector("lof", "os", matrix(np.ones((5, 1))), np.arange(5))


def test_score_csv(tmp_path):
    s = apply_budget(smooth_scores(series([1.0, 5.0, 2.0]), 5), 0.5)
    write_scores([s], tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "node,windowStart,detector,plane,rawScore,smoothScore,alert"
    assert lines[2] == "n1,600,z-score,os,5.0,3.0,1"
