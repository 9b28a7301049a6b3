import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqens.baselines import average_ensemble_predict
from seqens.evalkit import (
    CalibrationError,
    UtilityConfig,
    average_method,
    calibrate_tau,
    evaluate,
    min_ensemble_size_histogram,
    pareto_flags,
    pareto_sweep,
    raw_utility,
    read_table,
    reported_utility,
    selector_method,
    single_method,
    threshold_method,
    write_table,
)

from .helpers import tiny_cascade


def test_calibrated_tau_for_reference_anchors():
    tau_v = calibrate_tau((93.10, 1.0), (94.46, 3.0), 0.01)
    # solve tau_v * ln(94.46 / 93.10) = tau_c * ln 3 by hand
    assert tau_v == pytest.approx(0.01 * math.log(3.0) / math.log(94.46 / 93.10), rel=1e-12)
    assert tau_v == pytest.approx(0.7576, abs=1e-4)


def test_calibration_fixed_point_and_unit_single_model():
    cfg = UtilityConfig.calibrated(93.10, 94.46, 3, tau_c=0.01)
    assert abs(raw_utility(93.10, 1.0, cfg) - raw_utility(94.46, 3.0, cfg)) <= 1e-9
    assert reported_utility(raw_utility(93.10, 1.0, cfg), cfg) == 1.0


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_tau((90.0, 1.0), (90.0, 3.0))
    with pytest.raises(CalibrationError):
        calibrate_tau((90.0, 1.0), (91.0, 1.0))
    with pytest.raises(CalibrationError):
        raw_utility(90.0, 1.0, UtilityConfig())
    with pytest.raises(ValueError):
        UtilityConfig(tau_c=0.0)


def test_reported_utility_overflow_is_infinite():
    cfg = UtilityConfig(tau_v=1.0, single_ref_utility=0.0)
    assert reported_utility(800.0, cfg) == math.inf


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(-3, 3))
def test_ranking_invariant_to_constant_shift(raws, shift):
    cfg = UtilityConfig(tau_v=1.0, single_ref_utility=0.5)
    before = [reported_utility(r, cfg) for r in raws]
    after = [reported_utility(r + shift, cfg) for r in raws]
    for i in range(len(raws)):
        for j in range(len(raws)):
            if raws[i] < raws[j]:
                assert before[i] <= before[j] and after[i] <= after[j]


def _skyline(points):
    """Non-dominated set by a cost-sorted sweep (independent of the pairwise check)."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1]))
    keep, best = set(), -math.inf
    for i in order:
        if points[i][1] > best:
            keep.add(i)
            best = points[i][1]
    # exact duplicates of a kept point are not dominated either
    for i in range(len(points)):
        if any(points[i] == points[k] for k in keep):
            keep.add(i)
    return keep


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5).map(float), st.integers(80, 90).map(float)), min_size=1, max_size=12))
def test_pareto_flags_match_skyline(points):
    flags = pareto_flags(points)
    assert {i for i, f in enumerate(flags) if not f} == _skyline(points)


def test_evaluate_records_are_in_range():
    models, selector, x, y = tiny_cascade(T=3)
    for method in (
        selector_method(models, selector),
        single_method(models[0]),
        average_method(models),
        threshold_method(models, 0.6),
    ):
        rec = evaluate("m", method, x, y)
        assert 0.0 <= rec.top1 <= 100.0
        assert 1.0 <= rec.avg_cost <= 3.0
        assert rec.n == len(y)
    with pytest.raises(ValueError):
        evaluate("m", single_method(models[0]), x[:0], y[:0])


def test_evaluate_top1_by_hand():
    models, _, x, _ = tiny_cascade(T=1)
    pred = average_ensemble_predict(models, x).argmax(axis=1)
    y = pred.copy()
    y[:2] = (y[:2] + 1) % 3
    rec = evaluate("single", single_method(models[0]), x, y)
    assert rec.top1 == pytest.approx(100.0 * (len(y) - 2) / len(y))


def test_min_ensemble_size_histogram_matches_loop():
    models, _, _, _ = tiny_cascade(T=3)
    rng = np.random.default_rng(5)
    x = rng.normal(scale=2.0, size=(50, 4))
    y = rng.integers(0, 3, size=50)
    hist = min_ensemble_size_histogram(models, x, y)
    expected = {1: 0, 2: 0, 3: 0, "never": 0}
    for i in range(len(y)):
        found = "never"
        for k in (1, 2, 3):
            if average_ensemble_predict(models[:k], x[i : i + 1]).argmax() == y[i]:
                found = k
                break
        expected[found] += 1
    assert hist == expected
    assert sum(hist.values()) == 50


def test_pareto_sweep_adds_dominance_column():
    from seqens.evalkit import EvalRecord

    table = {0.1: (1.0, 80.0), 0.2: (2.0, 79.0), 0.3: (2.5, 85.0)}
    rows = pareto_sweep(lambda v: EvalRecord("m", table[v][1], table[v][0]), [0.1, 0.2, 0.3], label="w")
    assert [r["dominated"] for r in rows] == [0, 1, 0]
    assert rows[0]["w"] == 0.1


def test_table_round_trip(tmp_path):
    rows = [{"method": "a", "top1": 91.25, "cost": 1.5}, {"method": "b", "top1": 90.0, "cost": 3.0}]
    write_table(rows, tmp_path / "t.tsv")
    assert read_table(tmp_path / "t.tsv") == rows
    with pytest.raises(ValueError):
        write_table([], tmp_path / "empty.tsv")
