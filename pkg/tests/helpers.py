"""Shared fixtures-as-functions: tiny networks and a central-difference gradient checker."""

from __future__ import annotations

import numpy as np

from seqens.nets import BaseModel, Selector

REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def tiny_cascade(T=3, dim=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    models = [BaseModel(dim, classes, hidden=(5, 5), rng=rng) for _ in range(T)]
    selector = Selector(2 * classes + 1, hidden_dim=4, rng=rng)
    x = rng.normal(size=(6, dim))
    y = rng.integers(0, classes, size=6)
    return models, selector, x, y


def central_difference(f, param, index, eps=1e-4):
    """Five-point central stencil: truncation error O(eps^4), so round-off dominates only below ~1e-12."""
    old = param.data[index]
    values = []
    for k in (2, 1, -1, -2):
        param.data[index] = old + k * eps
        values.append(f())
    param.data[index] = old
    f2, f1, fm1, fm2 = values
    return (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * eps)


def grad_matches(analytic, numeric, rel=REL_TOL, floor=ABS_FLOOR):
    """|a - n| <= rel * max(|a|, |n|, floor)."""
    return abs(analytic - numeric) <= rel * max(abs(analytic), abs(numeric), floor)


def probe_gradients(loss_fn, params, probes, rng):
    """Compare analytic and numeric d loss / d param at ``probes`` random coordinates.

    Returns a list of (analytic, numeric) pairs.
    """
    for p in params:
        p.grad = None
    loss_fn_tensor = loss_fn()
    loss_fn_tensor.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    pairs = []
    for _ in range(probes):
        p = params[rng.integers(len(params))]
        index = tuple(int(rng.integers(s)) for s in p.data.shape)
        numeric = central_difference(lambda: loss_fn().item(), p, index)
        pairs.append((float(analytic[id(p)][index]), float(numeric)))
    return pairs


# acceptance outcomes, printed by the terminal-summary hook in conftest.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
