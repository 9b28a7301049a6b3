"""Reference methods: single model, average ensemble, confidence-threshold cascade."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numgraph as ng
from .nets import BaseModel
from .numgraph import Tensor

THRESHOLD_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


def _main_probs(model: BaseModel, x: np.ndarray) -> np.ndarray:
    with ng.no_grad():
        return model(Tensor(x)).main_probs.data


def average_ensemble_predict(pool: Sequence[BaseModel], x) -> np.ndarray:
    if len(pool) == 0:
        raise ValueError("average ensemble needs a non-empty pool")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return np.mean([_main_probs(m, x) for m in pool], axis=0)


@dataclass
class ThresholdPolicy:
    threshold: float
    pool: Sequence[BaseModel]

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if len(self.pool) == 0:
            raise ValueError("threshold cascade needs a non-empty pool")


def threshold_cascade(policy: ThresholdPolicy, x) -> tuple[np.ndarray, np.ndarray]:
    """Run the pool in order; stop once the running average's top-class probability reaches the threshold."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return cascade_from_probs(np.stack([_main_probs(m, x) for m in policy.pool], axis=1), policy.threshold)


def cascade_from_probs(member_probs: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Threshold cascade over precomputed member outputs of shape [n, T, K]."""
    n, T, _ = member_probs.shape
    running = np.cumsum(member_probs, axis=1) / np.arange(1, T + 1)[None, :, None]
    confident = running.max(axis=2) >= threshold
    confident[:, -1] = True
    steps = np.argmax(confident, axis=1) + 1
    return running[np.arange(n), steps - 1], steps


def threshold_grid_search(
    pool: Sequence[BaseModel],
    x,
    y,
    utility: Callable[[float, float], float],
    grid: Sequence[float] = THRESHOLD_GRID,
) -> tuple[float, list[tuple[float, float, float, float]]]:
    """Pick the threshold maximising ``utility(top1_percent, avg_cost)`` on held-out data.

    Ties go to the lowest threshold. Returns the best threshold and rows of
    (threshold, top1, cost, utility) for the whole grid.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    member_probs = np.stack([_main_probs(m, x) for m in pool], axis=1)
    rows = []
    best, best_u = None, -np.inf
    for thr in grid:
        probs, steps = cascade_from_probs(member_probs, float(thr))
        top1 = 100.0 * float(np.mean(probs.argmax(axis=1) == y))
        cost = float(np.mean(steps))
        u = utility(top1, cost)
        rows.append((float(thr), top1, cost, u))
        if u > best_u:
            best, best_u = float(thr), u
    return best, rows
