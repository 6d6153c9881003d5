"""One-class SVM (Schoelkopf dual) with an RBF kernel, solved by pairwise SMO steps.

Dual: minimize 1/2 a'Ka subject to 0 <= a_i <= 1/(nu*l) and sum(a) = 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    sq = (a ** 2).sum(axis=1)[:, None] + (b ** 2).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def scale_gamma(x: np.ndarray) -> float:
    """1 / (d * mean per-feature variance), falling back to 1 for degenerate data."""
    var = float(np.mean(np.var(x, axis=0))) if x.size else 0.0
    d = x.shape[1] if x.ndim == 2 else 1
    if not var > 0 or not math.isfinite(var):
        return 1.0
    return 1.0 / (d * var)


@dataclass(frozen=True)
class OneClassSvmModel:
    support: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    converged: bool
    iterations: int
    gap: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        """sum(a_i K(x_i, x)) - rho; negative outside the estimated support."""
        k = rbf_kernel(np.asarray(x, dtype=float), self.support, self.gamma)
        return k @ self.alpha - self.rho

    def params(self) -> dict:
        return {"nu": self.nu, "gamma": self.gamma, "rho": self.rho,
                "nSupport": int(len(self.alpha)), "converged": self.converged,
                "iterations": self.iterations, "kktGap": self.gap}


def train_one_class_svm(
    x: np.ndarray, nu: float = 0.05, gamma: float | str = "scale", max_train: int = 2000,
    seed: int = 0, tol: float = 1e-4, max_iter: int = 200_000,
) -> OneClassSvmModel:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 training rows")
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    if x.shape[0] > max_train:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(x.shape[0], size=max_train, replace=False))]
    g = scale_gamma(x) if gamma == "scale" else float(gamma)
    n = x.shape[0]
    upper = 1.0 / (nu * n)
    k = rbf_kernel(x, x, g)
    diag = np.diag(k).copy()

    # Feasible start: fill the first floor(nu*n) coefficients to the bound.
    alpha = np.zeros(n)
    n_full = int(math.floor(nu * n))
    alpha[:n_full] = upper
    if n_full < n:
        alpha[n_full] = 1.0 - alpha.sum()
    grad = k @ alpha

    converged = False
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        can_up = alpha < upper - 1e-15
        can_down = alpha > 1e-15
        i = int(np.argmin(np.where(can_up, grad, np.inf)))
        j = int(np.argmax(np.where(can_down, grad, -np.inf)))
        gap = float(grad[j] - grad[i])
        if gap < tol:
            converged = True
            break
        curv = diag[i] + diag[j] - 2.0 * k[i, j]
        step = gap / curv if curv > 1e-12 else math.inf
        step = min(step, upper - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        grad += step * (k[:, i] - k[:, j])
    if not converged:
        logger.warning("one-class SVM stopped after %d iterations, KKT gap %.3g", it, gap)

    alpha = np.clip(alpha, 0.0, upper)
    free = (alpha > 1e-12) & (alpha < upper - 1e-12)
    if free.any():
        rho = float(grad[free].mean())
    else:
        at_upper = grad[alpha >= upper - 1e-12]
        at_zero = grad[alpha <= 1e-12]
        lb = at_upper.max() if at_upper.size else -math.inf
        ub = at_zero.min() if at_zero.size else math.inf
        rho = float((lb + ub) / 2) if math.isfinite(lb) and math.isfinite(ub) else float(
            lb if math.isfinite(lb) else ub)
    sv = alpha > 1e-12
    return OneClassSvmModel(x[sv].copy(), alpha[sv].copy(), rho, g, nu, converged, it, gap)


def score_one_class_svm(model: OneClassSvmModel, x: np.ndarray) -> np.ndarray:
    """rho - sum(a_i K(x_i, x)); higher is more anomalous."""
    return -model.decision(x)
