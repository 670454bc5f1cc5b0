"""Glaucoma decision curve: fit sigma(a * (gamma - b)) to binary labels.

Fitting is deterministic: a dense grid over (a, b) followed by monotone
gradient-descent refinement of the best cell, so the returned loss is never
worse than any grid point. The 'curve fitting' objective is squared error;
a log-likelihood objective is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_A_GRID_POINTS = 64
_B_GRID_POINTS = 256
_A_RANGE = (0.1, 200.0)
_REFINE_STEPS = 200


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SigmoidClassifier:
    """Fitted slope ``a`` and inflection ratio ``b``; the predicted glaucoma
    probability is sigma(a * (gamma - b))."""

    a: float
    b: float
    fit_loss: float | None = None


def predict(clf: SigmoidClassifier, gamma: np.ndarray | float) -> np.ndarray | float:
    """Glaucoma probability in (0, 1) for a ratio (or array of ratios)."""
    if not np.all(np.isfinite(gamma)):
        raise ValueError("predict: gamma must be finite")
    return sigmoid(clf.a * (np.asarray(gamma, dtype=np.float64) - clf.b))


def _loss(a: float, b: float, gammas: np.ndarray, labels: np.ndarray,
          objective: str) -> float:
    p = sigmoid(a * (gammas - b))
    if objective == "squared":
        return float(np.mean((p - labels) ** 2))
    eps = 1e-12
    return float(-np.mean(labels * np.log(p + eps) + (1 - labels) * np.log(1 - p + eps)))


def _grad(a: float, b: float, gammas: np.ndarray, labels: np.ndarray,
          objective: str) -> tuple[float, float]:
    z = a * (gammas - b)
    p = sigmoid(z)
    if objective == "squared":
        dz = 2.0 * (p - labels) * p * (1.0 - p)
    else:
        dz = p - labels
    da = float(np.mean(dz * (gammas - b)))
    db = float(np.mean(dz * (-a)))
    return da, db


def fit_sigmoid(gammas, labels, objective: str = "squared") -> SigmoidClassifier:
    """Fit (a, b) by coarse grid search plus gradient refinement.

    The a-grid is log-spaced over [0.1, 200] and evaluated at both signs so
    inverted label conventions fit symmetrically; the b-grid spans the
    observed gamma range. Requires at least two samples per class.
    """
    if objective not in ("squared", "loglik"):
        raise ValueError(f"objective must be 'squared' or 'loglik', got {objective!r}")
    gammas = np.asarray(gammas, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if gammas.shape != labels.shape or gammas.ndim != 1:
        raise ValueError(f"fit_sigmoid: gammas {gammas.shape} and labels {labels.shape} "
                         f"must be equal-length vectors")
    if not np.isfinite(gammas).all():
        raise ValueError("fit_sigmoid: gamma values must be finite")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("fit_sigmoid: labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos < 2 or labels.size - n_pos < 2:
        raise ValueError(f"fit_sigmoid: need >= 2 samples per class, "
                         f"got {labels.size - n_pos} negative / {n_pos} positive")

    magnitudes = np.geomspace(*_A_RANGE, _A_GRID_POINTS)
    a_grid = np.concatenate([magnitudes, -magnitudes])
    b_lo, b_hi = float(gammas.min()), float(gammas.max())
    b_grid = np.linspace(b_lo, b_hi, _B_GRID_POINTS) if b_hi > b_lo \
        else np.array([b_lo])

    best_a, best_b = float(a_grid[0]), float(b_grid[0])
    best = np.inf
    for a in a_grid:
        z = a * (gammas[None, :] - b_grid[:, None])
        p = sigmoid(z)
        if objective == "squared":
            losses = np.mean((p - labels[None, :]) ** 2, axis=1)
        else:
            eps = 1e-12
            losses = -np.mean(labels[None, :] * np.log(p + eps)
                              + (1 - labels[None, :]) * np.log(1 - p + eps), axis=1)
        idx = int(np.argmin(losses))
        if losses[idx] < best:
            best, best_a, best_b = float(losses[idx]), float(a), float(b_grid[idx])

    # monotone refinement: reject any step that does not decrease the loss
    a, b, loss = best_a, best_b, best
    lr = 1.0
    for _ in range(_REFINE_STEPS):
        da, db = _grad(a, b, gammas, labels, objective)
        accepted = False
        for _ in range(30):
            cand_a, cand_b = a - lr * da, b - lr * db
            cand = _loss(cand_a, cand_b, gammas, labels, objective)
            if cand < loss:
                a, b, loss = cand_a, cand_b, cand
                lr *= 1.2
                accepted = True
                break
            lr /= 2.0
        if not accepted:
            break
    return SigmoidClassifier(a=a, b=b, fit_loss=loss)
