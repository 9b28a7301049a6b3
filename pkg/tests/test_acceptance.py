"""Acceptance checks, one per criterion, each printed as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (summary at the end) or
``python -m tests.test_acceptance`` for the lines alone.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from seqens.baselines import THRESHOLD_GRID, average_ensemble_predict, cascade_from_probs, threshold_cascade, ThresholdPolicy
from seqens.datahub import gen_tiered
from seqens.evalkit import (
    UtilityConfig,
    average_method,
    evaluate,
    min_ensemble_size_histogram,
    raw_utility,
    reported_utility,
    selector_method,
    single_method,
)
from seqens.halting import CascadeGraph, cascade_forward, force_terminal, halting_pmf, halting_step, survival_curve
from seqens.losses import LossWeights, base_loss, cost_loss, ensemble_loss, rank_loss, task_loss, total_loss
from seqens.nets import gumbel_binarize
from seqens.numgraph import Tensor
from seqens.training import TrainConfig, train_pool, train_sequential

from .helpers import ACCEPTANCE, grad_matches, probe_gradients, tiny_cascade

DESK_SEEDS = (0, 1, 2)


def _record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# 1: halting-calculus identities on random soft h


def check_1():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_sum, worst_rec = 0.0, 0.0
    for _ in range(1000):
        T = int(rng.integers(2, 7))
        h = force_terminal(rng.uniform(size=T))
        p = halting_pmf(h)
        S = survival_curve(h)
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        worst_rec = max(worst_rec, np.max(np.abs(p - (S - np.append(S[1:], 0.0)))))
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-12 and worst_rec <= 1e-12 and elapsed < 1.0
    return ok, f"max|sum p - 1|={worst_sum:.1e} max|p - dS|={worst_rec:.1e} in {elapsed:.3f}s"


# 2: exhaustive binary patterns


def check_2():
    start = time.perf_counter()
    bad = 0
    count = 0
    for T in range(1, 7):
        for bits in itertools.product([0.0, 1.0], repeat=T):
            count += 1
            p = halting_pmf(bits)
            z = halting_step(bits)
            forced = list(bits[:-1]) + [1.0]
            first = forced.index(1.0) + 1
            one_hot = np.array_equal(p, np.eye(T)[first - 1])
            if not (one_hot and z == first and z == int(np.argmax(p)) + 1):
                bad += 1
    elapsed = time.perf_counter() - start
    return bad == 0 and elapsed < 1.0, f"{count} patterns, {bad} mismatches, {elapsed:.3f}s"


# 3: loss-term gradients against central differences


@contextlib.contextmanager
def _frozen_predictions(graph):
    """Hold the detached member predictions fixed while parameters are perturbed."""
    fixed = [Tensor(o.main_probs.data.copy()) for o in graph.outputs]
    original = CascadeGraph.predictions
    CascadeGraph.predictions = lambda self, detached=True: fixed if detached else original(self, detached)
    try:
        yield
    finally:
        CascadeGraph.predictions = original


def check_3(probes: int = 20):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    models, selector, x, y = tiny_cascade(T=3, seed=5)
    theta2 = models[1].parameters()
    phi = selector.parameters()
    weights = LossWeights(ens=0.3, cost=0.05, rank=0.7)

    def base():
        return base_loss(models[0](x), y, lambda_dis=0.1)

    def ens():
        return ensemble_loss(cascade_forward(models, selector, x, stages=3).soft_ensemble(3), y)

    def cost():
        return cost_loss(cascade_forward(models, selector, x, stages=3).pmf)

    def rank():
        g = cascade_forward(models, selector, x, stages=2)
        return rank_loss(g.survival[1], task_loss(y, g.outputs[1].main_probs), task_loss(y, g.soft_ensemble(1)))

    def total():
        return total_loss(cascade_forward(models, selector, x, stages=2), y, 2, weights, 0.1).total

    terms = {
        "base": (base, models[0].parameters()),
        "ens": (ens, phi),
        "cost": (cost, phi),
        "rank": (rank, theta2 + phi),
    }
    failures = []
    worst = 0.0
    for name, (fn, params) in terms.items():
        for a, n in probe_gradients(fn, params, probes, rng):
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-8))
            if not grad_matches(a, n):
                failures.append((name, a, n))
    with _frozen_predictions(cascade_forward(models, selector, x, stages=2)):
        for a, n in probe_gradients(total, theta2 + phi, probes, rng):
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-8))
            if not grad_matches(a, n):
                failures.append(("total", a, n))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30
    return ok, f"5 terms x {probes} probes, worst rel err {worst:.1e}, {len(failures)} failures, {elapsed:.1f}s"


# 4: gradient routing at stage 2


def _grads_zero(params):
    return all(p.grad is None or not np.any(p.grad) for p in params)


def _backprop(loss, modules):
    for m in modules:
        m.zero_grad()
        m.requires_grad_(True)
    loss().backward()


def check_4():
    models, selector, x, y = tiny_cascade(T=2, seed=9)
    mods = models + [selector]
    graph = lambda: cascade_forward(models, selector, x, stages=2)  # noqa: E731
    w = LossWeights(ens=0.5, cost=0.5, rank=0.5)
    results = {}
    _backprop(lambda: total_loss(graph(), y, 2, w).total, mods)
    results["dtotal/dtheta1"] = _grads_zero(models[0].parameters())
    reached = not _grads_zero(models[1].parameters()) and not _grads_zero(selector.parameters())
    _backprop(lambda: ensemble_loss(graph().soft_ensemble(2), y), mods)
    results["dens/dtheta2"] = _grads_zero(models[1].parameters())
    _backprop(lambda: cost_loss(graph().pmf), mods)
    results["dcost/dtheta2"] = _grads_zero(models[1].parameters())
    _backprop(lambda: base_loss(graph().outputs[1], y), mods)
    results["dbase/dphi"] = _grads_zero(selector.parameters())
    ok = all(results.values()) and reached
    detail = ", ".join(f"{k}={'0' if v else 'nonzero'}" for k, v in results.items())
    return ok, detail + ("" if reached else " (total did not reach theta2/phi)")


# 5: Gumbel binarization frequency and expected halting step


def check_5():
    rng = np.random.default_rng(2024)
    n = 100_000
    h = Tensor(np.full((n, 1), 0.7))
    freq = float(gumbel_binarize(h, 0.1, "train", rng).data.mean())
    worst = 0.0
    for _ in range(5):
        T = int(rng.integers(2, 6))
        hv = rng.uniform(0.05, 0.95, size=T)
        cols = [gumbel_binarize(Tensor(np.full((n, 1), hv[t])), 0.1, "train", rng).data for t in range(T - 1)]
        hb = np.concatenate(cols + [np.ones((n, 1))], axis=1)
        empirical = float(np.mean(halting_step(hb)))
        expected = cost_loss(halting_pmf(hv)[None, :]).item()
        worst = max(worst, abs(empirical - expected) / expected)
    ok = abs(freq - 0.70) <= 0.02 and worst <= 0.02
    return ok, f"halt frequency {freq:.4f} (target 0.70 +/- 0.02), worst step-mean deviation {100 * worst:.2f}%"


# 6: utility calibration on the reference anchors


def check_6():
    cfg = UtilityConfig.calibrated(93.10, 94.46, 3, tau_c=0.01)
    gap = abs(raw_utility(93.10, 1.0, cfg) - raw_utility(94.46, 3.0, cfg))
    single = reported_utility(raw_utility(93.10, 1.0, cfg), cfg)
    ok = gap <= 1e-9 and single == 1.0 and abs(cfg.tau_v - 0.7576) <= 1e-4
    return ok, f"tau_v={cfg.tau_v:.6f}, anchor gap {gap:.1e}, single-model utility {single!r}"


# shared desk-scale runs for 7-10


@lru_cache(maxsize=None)
def desk_run(seed: int):
    ds = gen_tiered(1500, classes=3, tiers=3, seed=seed, split_sizes=(3000, 500, 1000))
    cfg = TrainConfig(seed=seed)
    start = time.perf_counter()
    pool = train_pool(cfg, ds)
    cascade = train_sequential(cfg, ds)
    return ds, pool, cascade, time.perf_counter() - start


def check_7():
    ds, pool, _, _ = desk_run(0)
    xt, _ = ds.subset("test")
    member = np.stack([average_ensemble_predict([m], xt) for m in pool], axis=1)
    running = np.cumsum(member, axis=1) / np.arange(1, 4)[None, :, None]
    degenerate = bool(np.any(running.max(axis=2) >= 1.0))
    p0, s0 = threshold_cascade(ThresholdPolicy(0.0, pool), xt)
    p1, s1 = threshold_cascade(ThresholdPolicy(1.0, pool), xt)
    same_single = np.array_equal(p0, average_ensemble_predict(pool[:1], xt)) and np.all(s0 == 1)
    same_average = np.allclose(p1, average_ensemble_predict(pool, xt), rtol=0, atol=1e-15) and np.all(s1 == 3)
    costs = [cascade_from_probs(member, float(t))[1].mean() for t in THRESHOLD_GRID]
    monotone = all(b >= a for a, b in zip(costs, costs[1:]))
    ok = same_single and same_average and monotone and not degenerate
    return ok, (
        f"thr 0 == single: {same_single}, thr 1 == average: {same_average}, "
        f"cost monotone over {len(costs)} thresholds: {monotone} ({costs[0]:.2f} -> {costs[-1]:.2f})"
    )


def desk_outcome(seed: int):
    ds, pool, cascade, elapsed = desk_run(seed)
    xt, yt = ds.subset("test")
    single = evaluate("single", single_method(pool[0]), xt, yt)
    average = evaluate("average", average_method(pool), xt, yt)
    utility = UtilityConfig.calibrated(single.top1, average.top1, len(pool), tau_c=0.01)
    average.with_utility(utility)
    ours = evaluate("selector", selector_method(cascade.models, cascade.selector), xt, yt, utility)
    ok = ours.top1 >= average.top1 - 1.0 and ours.avg_cost <= 2.5 and ours.reported_utility > average.reported_utility
    return ok, ours, average, elapsed


def check_8():
    lines, passed = [], 0
    for seed in DESK_SEEDS:
        ok, ours, average, elapsed = desk_outcome(seed)
        passed += ok
        lines.append(
            f"seed {seed}: {ours.top1:.1f}% @ {ours.avg_cost:.2f} util {ours.reported_utility:.3f} "
            f"vs avg {average.top1:.1f}% util {average.reported_utility:.3f} [{'ok' if ok else 'miss'}, {elapsed:.0f}s]"
        )
    return passed >= 2, f"{passed}/3 seeds; " + "; ".join(lines)


def check_9():
    ds, pool, _, _ = desk_run(0)
    xt, yt = ds.subset("test")
    hist = min_ensemble_size_histogram(pool, xt, yt)
    solvable = sum(v for k, v in hist.items() if k != "never")
    share = hist[1] / solvable
    return share >= 0.60, f"{100 * share:.1f}% of {solvable} solvable samples need one model; histogram {hist}"


def check_10():
    _, _, cascade, _ = desk_run(0)
    log = cascade.log
    finite = all(math.isfinite(v) for row in log for v in row.values())
    parts = []
    ok = finite
    for stage in sorted({r["stage"] for r in log}):
        if stage < 2:
            continue
        rows = [r for r in log if r["stage"] == stage]
        first, last = rows[0]["base"], rows[-1]["base"]
        ok &= last <= first
        parts.append(f"stage {stage}: base {first:.3f} -> {last:.3f}")
    return ok, ("all components finite; " if finite else "NON-FINITE values logged; ") + ", ".join(parts)


CHECKS = {1: check_1, 2: check_2, 3: check_3, 4: check_4, 5: check_5, 6: check_6, 7: check_7, 8: check_8, 9: check_9, 10: check_10}


@pytest.mark.parametrize("number", sorted(CHECKS))
def test_criterion(number):
    ok, detail = CHECKS[number]()
    _record(number, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    for number, check in CHECKS.items():
        _record(number, *check())
