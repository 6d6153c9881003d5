"""Window scoring: robust z, isolation forest and one-class SVM, under a fixed alert budget."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import RobustScaler, WindowFeatureMatrix
from .iforest import IsolationForestModel, score_isolation_forest, train_isolation_forest
from .ocsvm import OneClassSvmModel, score_one_class_svm, train_one_class_svm
from .scoring import (
    ScoreSeries,
    apply_budget,
    fit_scaler_for,
    nearest_rank,
    score_robust_z,
    smooth_scores,
    trailing_mean,
    write_scores,
)

DETECTORS = ("z-score", "isolation-forest", "one-class-svm")
DISPLAY_NAMES = {
    "z-score": "z-score",
    "isolation-forest": "Isolation Forest",
    "one-class-svm": "One-Class SVM",
}

__all__ = [
    "DETECTORS", "DISPLAY_NAMES", "DetectorConfig", "IsolationForestModel", "OneClassSvmModel",
    "ScoreSeries", "apply_budget", "fit_scaler_for", "learning_input", "nearest_rank",
    "run_detector", "score_isolation_forest", "score_one_class_svm", "score_robust_z",
    "smooth_scores", "trailing_mean", "train_isolation_forest", "train_one_class_svm",
    "write_scores",
]


@dataclass(frozen=True)
class DetectorConfig:
    budget: float = 0.01
    smooth_window: int = 5
    per_node_threshold: bool = False
    if_trees: int = 100
    if_subsample: int = 256
    svm_nu: float = 0.05
    svm_gamma: str | float = "scale"
    svm_max_train: int = 2000
    svm_tol: float = 1e-4
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "budget": self.budget, "smoothWindow": self.smooth_window,
            "perNodeThreshold": self.per_node_threshold,
            "isolationForest": {"nTrees": self.if_trees, "subsample": self.if_subsample},
            "oneClassSvm": {"nu": self.svm_nu, "gamma": self.svm_gamma,
                            "maxTrain": self.svm_max_train, "kktTol": self.svm_tol},
            "seed": self.seed,
        }


def learning_input(matrix: WindowFeatureMatrix, scaler: RobustScaler) -> np.ndarray:
    """Robust-scaled features with missing entries imputed at the median (0 after
    scaling), plus a trailing column with the row's fraction of missing features."""
    z = scaler.transform(matrix.values)
    missing = np.isnan(z)
    frac = missing.mean(axis=1) if z.shape[1] else np.ones(len(z))
    return np.column_stack([np.where(missing, 0.0, z), frac])


@dataclass
class DetectorRun:
    scores: ScoreSeries
    params: dict = field(default_factory=dict)


def run_detector(
    name: str, plane_name: str, matrix: WindowFeatureMatrix, train_rows: np.ndarray,
    config: DetectorConfig = DetectorConfig(),
) -> DetectorRun:
    """Fit on ``train_rows``, score every row, smooth and threshold under the budget."""
    scaler = fit_scaler_for(matrix, train_rows)
    if name == "z-score":
        raw = score_robust_z(matrix, scaler).raw
        params: dict = {}
    elif name == "isolation-forest":
        x = learning_input(matrix, scaler)
        model = train_isolation_forest(x[train_rows], config.if_trees, config.if_subsample, config.seed)
        raw = score_isolation_forest(model, x)
        params = model.params()
        if np.all(raw == raw[0]):
            params["warning"] = "constant input; all scores equal"
    elif name == "one-class-svm":
        x = learning_input(matrix, scaler)
        model = train_one_class_svm(
            x[train_rows], config.svm_nu, config.svm_gamma, config.svm_max_train,
            config.seed, config.svm_tol,
        )
        raw = score_one_class_svm(model, x)
        params = model.params()
        if not model.converged:
            params["warning"] = "solver hit the iteration cap; best iterate returned"
    else:
        raise ValueError(f"unknown detector {name!r}")
    scores = ScoreSeries.from_matrix(name, plane_name, matrix, raw)
    scores = smooth_scores(scores, config.smooth_window)
    scores = apply_budget(scores, config.budget, config.per_node_threshold)
    params = {**params, "threshold": scores.threshold, "alertFraction": scores.alert_fraction}
    if scores.warnings:
        params["warnings"] = list(scores.warnings)
    return DetectorRun(scores, params)
