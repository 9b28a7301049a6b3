"""Accuracy, cost and utility metrics, Pareto analysis and ensemble-size histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import ThresholdPolicy, average_ensemble_predict, threshold_cascade
from .halting import HaltingTrace, infer
from .nets import BaseModel, Selector


class CalibrationError(ValueError):
    pass


@dataclass
class UtilityConfig:
    """Weighted-product utility top1^tau_v / cost^tau_c, normalised against a single-model anchor."""

    tau_v: float | None = None
    tau_c: float = 0.01
    v: float = 1.0
    c: float = 1.0
    single_ref_utility: float | None = None

    def __post_init__(self):
        if not self.tau_c > 0:
            raise ValueError(f"tau_c must be positive, got {self.tau_c}")

    @classmethod
    def calibrated(cls, single_top1: float, full_top1: float, stages: int, tau_c: float = 0.01) -> "UtilityConfig":
        """Exponents under which the single model (cost 1) and the full ensemble (cost T) tie."""
        tau_v = calibrate_tau((single_top1, 1.0), (full_top1, float(stages)), tau_c)
        cfg = cls(tau_v=tau_v, tau_c=tau_c)
        cfg.single_ref_utility = raw_utility(single_top1, 1.0, cfg)
        return cfg


def calibrate_tau(single: tuple[float, float], full: tuple[float, float], tau_c: float = 0.01) -> float:
    (v1, c1), (v2, c2) = single, full
    if not v2 > v1:
        raise CalibrationError(f"full ensemble top-1 {v2} does not improve on single model {v1}; calibration undefined")
    if not c2 > c1:
        raise CalibrationError(f"full ensemble cost {c2} must exceed single-model cost {c1}")
    return tau_c * math.log(c2 / c1) / math.log(v2 / v1)


def raw_utility(top1: float, cost: float, cfg: UtilityConfig) -> float:
    if cost <= 0:
        raise ValueError(f"cost must be positive, got {cost}")
    if cfg.tau_v is None:
        raise CalibrationError("utility exponents are not calibrated")
    return (top1 / cfg.v) ** cfg.tau_v / (cost / cfg.c) ** cfg.tau_c


def reported_utility(raw: float, cfg: UtilityConfig) -> float:
    if cfg.single_ref_utility is None:
        raise CalibrationError("single-model reference utility is not set")
    diff = raw - cfg.single_ref_utility
    return math.exp(diff) if diff < 700 else math.inf


@dataclass
class EvalRecord:
    method: str
    top1: float
    avg_cost: float
    raw_utility: float = float("nan")
    reported_utility: float = float("nan")
    n: int = 0
    trace: HaltingTrace | None = field(default=None, repr=False)
    steps: np.ndarray | None = field(default=None, repr=False)
    predictions: np.ndarray | None = field(default=None, repr=False)

    def with_utility(self, cfg: UtilityConfig | None) -> "EvalRecord":
        if cfg is not None and cfg.tau_v is not None:
            self.raw_utility = raw_utility(self.top1, self.avg_cost, cfg)
            self.reported_utility = reported_utility(self.raw_utility, cfg)
        return self

    def row(self) -> dict:
        return {
            "method": self.method,
            "top1": self.top1,
            "cost": self.avg_cost,
            "raw_utility": self.raw_utility,
            "utility": self.reported_utility,
            "n": self.n,
        }


# a method maps a feature batch to (probabilities [n, K], steps used [n], optional trace)
Method = Callable[[np.ndarray], tuple]


def selector_method(models: Sequence[BaseModel], selector: Selector | None) -> Method:
    def run(x):
        pred, trace = infer(models, selector, x, mode="eval")
        return pred.probs, pred.steps_used, trace

    return run


def single_method(model: BaseModel) -> Method:
    def run(x):
        probs = average_ensemble_predict([model], x)
        return probs, np.ones(len(probs), dtype=np.int64)

    return run


def average_method(pool: Sequence[BaseModel]) -> Method:
    def run(x):
        probs = average_ensemble_predict(pool, x)
        return probs, np.full(len(probs), len(pool), dtype=np.int64)

    return run


def threshold_method(pool: Sequence[BaseModel], threshold: float) -> Method:
    policy = ThresholdPolicy(threshold, pool)

    def run(x):
        return threshold_cascade(policy, x)

    return run


def evaluate(name: str, method: Method, x, y, utility: UtilityConfig | None = None) -> EvalRecord:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    out = method(x)
    probs, steps = out[0], np.asarray(out[1])
    trace = out[2] if len(out) > 2 else None
    pred = probs.argmax(axis=1)
    rec = EvalRecord(
        method=name,
        top1=100.0 * float(np.mean(pred == y)),
        avg_cost=float(np.mean(steps)),
        n=len(y),
        trace=trace,
        steps=steps,
        predictions=pred,
    )
    return rec.with_utility(utility)


def pareto_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """True where (cost, top1) is dominated: another point is no costlier, no less accurate, and better in one."""
    flags = []
    for i, (ci, ai) in enumerate(points):
        dominated = any(
            (cj <= ci and aj >= ai and (cj < ci or aj > ai)) for j, (cj, aj) in enumerate(points) if j != i
        )
        flags.append(dominated)
    return flags


def pareto_sweep(run: Callable[[float], EvalRecord], grid: Iterable[float], label: str = "setting") -> list[dict]:
    """Evaluate ``run`` at every grid value and flag dominated (cost, top1) points."""
    rows = []
    for value in grid:
        rec = run(value)
        rows.append({label: value, **rec.row()})
    for row, dominated in zip(rows, pareto_flags([(r["cost"], r["top1"]) for r in rows])):
        row["dominated"] = int(dominated)
    return rows


def min_ensemble_size_histogram(pool: Sequence[BaseModel], x, y) -> dict:
    """For each sample, the smallest prefix size whose average predicts the label ("never" if none)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    member = np.stack([average_ensemble_predict([m], x) for m in pool], axis=1)
    running = np.cumsum(member, axis=1)
    correct = running.argmax(axis=2) == y[:, None]
    hist: dict = {k: 0 for k in range(1, len(pool) + 1)}
    hist["never"] = 0
    first = np.where(correct.any(axis=1), np.argmax(correct, axis=1) + 1, 0)
    for k in first:
        hist["never" if k == 0 else int(k)] += 1
    return hist


def write_table(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    """Tab-separated table with a header row."""
    if not rows:
        raise ValueError("no rows to write")
    columns = list(columns or rows[0].keys())
    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row.get(c, "")) for c in columns) + "\n")


def read_table(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        row = {}
        for key, cell in zip(header, ln.split("\t")):
            try:
                row[key] = float(cell)
            except ValueError:
                row[key] = cell
        rows.append(row)
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
