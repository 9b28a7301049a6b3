"""Halting-probability calculus and sequential cascade inference.

Steps are 1-based in the public functions (``t`` in ``1..T``), matching the
usual way the halting step ``z`` is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterator, Sequence

import numpy as np

from . import numgraph as ng
from .nets import BaseModel, BaseOutput, Selector, encode_selector_input, gumbel_binarize
from .numgraph import Tensor


def force_terminal(h) -> np.ndarray:
    """Copy of ``h`` with the last step's halt probability set to 1."""
    h = np.array(h, dtype=np.float64)
    h[..., -1] = 1.0
    return h


def survival(h, t: int) -> float:
    """S(t) = prod_{i<t} (1 - h_i); S(1) = 1."""
    h = np.asarray(h, dtype=np.float64)
    if not 1 <= t <= h.shape[-1]:
        raise IndexError(f"step {t} outside 1..{h.shape[-1]}")
    return float(np.prod(1.0 - h[: t - 1]))


def survival_curve(h) -> np.ndarray:
    """S(1..T) along the last axis."""
    h = np.asarray(h, dtype=np.float64)
    one_minus = 1.0 - h[..., :-1]
    ones = np.ones(h.shape[:-1] + (1,))
    return np.concatenate([ones, np.cumprod(one_minus, axis=-1)], axis=-1)


def halting_pmf(h) -> np.ndarray:
    """p_t = h_t * S(t) after forcing a halt at the last step; sums to 1."""
    h = force_terminal(h)
    return h * survival_curve(h)


def halting_step(h_binary) -> int | np.ndarray:
    """First step (1-based) whose binarized halt flag is set, after terminal forcing."""
    hb = force_terminal(h_binary) >= 0.5
    z = np.argmax(hb, axis=-1) + 1
    return int(z) if np.ndim(z) == 0 else z


def ensemble_predict(preds: Sequence, z: int) -> np.ndarray:
    """Arithmetic mean of the first ``z`` predictions."""
    if len(preds) == 0:
        raise ValueError("ensemble_predict needs at least one prediction")
    if not 1 <= z <= len(preds):
        raise ValueError(f"halting step {z} outside 1..{len(preds)}")
    stacked = np.asarray([np.asarray(p, dtype=np.float64) for p in preds[:z]])
    return stacked.mean(axis=0)


def soft_ensemble_at(preds: Sequence, surv: Sequence) -> Tensor:
    """Survival-weighted average of preds[0..t-1]; differentiable in the survival weights."""
    if len(preds) != len(surv) or not preds:
        raise ValueError("soft_ensemble_at needs equally many predictions and survival values")
    num = None
    den = None
    for y, s in zip(preds, surv):
        term = ng.mul(y, s)
        num = term if num is None else num + term
        den = s if den is None else den + s
    return num / den


# graph-level chains used during training


def survival_terms(hs: Sequence[Tensor]) -> list[Tensor]:
    """[S(1), ..., S(T)] as tensors given per-step halt probabilities h_1..h_T."""
    if not hs:
        return []
    batch_shape = hs[0].shape
    out = [Tensor(np.ones(batch_shape))]
    for h in hs[:-1]:
        out.append(out[-1] * (1.0 - h))
    return out


def pmf_terms(hs: Sequence[Tensor]) -> list[Tensor]:
    """p_t = h_t S(t) for t < T and p_T = S(T) (forced terminal halt)."""
    surv = survival_terms(hs)
    return [h * s for h, s in zip(hs[:-1], surv[:-1])] + [surv[-1]]


@dataclass
class CascadeGraph:
    """Forward pass of the first ``stages`` models and the selector on a batch."""

    outputs: list[BaseOutput]
    h: list[Tensor]  # halt probabilities per step, the last one forced to 1
    survival: list[Tensor]
    pmf: list[Tensor]

    def predictions(self, detached: bool = True) -> list[Tensor]:
        return [ng.detach(o.main_probs) if detached else o.main_probs for o in self.outputs]

    def soft_ensemble(self, t: int) -> Tensor:
        """Soft ensemble through step ``t`` (1-based) with base predictions detached."""
        return soft_ensemble_at(self.predictions()[:t], self.survival[:t])


def cascade_forward(
    models: Sequence[BaseModel],
    selector: Selector | None,
    x,
    stages: int | None = None,
    binarize: str | None = None,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> CascadeGraph:
    """Run models 1..stages on every sample and the selector on their detached outputs.

    ``binarize="gumbel"`` replaces each soft h_t by a straight-through Gumbel sample.
    """
    stages = len(models) if stages is None else stages
    if not 1 <= stages <= len(models):
        raise ValueError(f"stages must be in 1..{len(models)}, got {stages}")
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    batch = x.shape[0]
    outputs = [models[t](x) for t in range(stages)]
    hs: list[Tensor] = []
    if stages > 1:
        if selector is None:
            raise ValueError("a selector is required for more than one stage")
        d = selector.initial_state(batch)
        for t in range(stages - 1):
            e = ng.detach(encode_selector_input(outputs[t]))
            h, d = selector.step(e, d)
            if binarize == "gumbel":
                h = gumbel_binarize(h, temperature, "train", rng)
            elif binarize is not None:
                raise ValueError(f"unknown binarize mode {binarize!r}")
            hs.append(h)
    hs.append(Tensor(np.ones((batch, 1))))
    return CascadeGraph(outputs, hs, survival_terms(hs), pmf_terms(hs))


@dataclass
class HaltingTrace:
    """Per-sample halting record; arrays are [batch, T] and z is [batch]."""

    h: np.ndarray
    S: np.ndarray
    p: np.ndarray
    z: np.ndarray

    def records(self) -> Iterator[dict]:
        for i in range(len(self.z)):
            yield {
                "h": self.h[i].tolist(),
                "S": self.S[i].tolist(),
                "p": self.p[i].tolist(),
                "z": int(self.z[i]),
            }


@dataclass
class EnsemblePrediction:
    probs: np.ndarray  # [batch, K]
    steps_used: np.ndarray  # [batch]
    per_step_probs: np.ndarray | None = None  # [batch, T, K] soft ensembles, train mode only


def infer(
    models: Sequence[BaseModel],
    selector: Selector | None,
    x,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> tuple[EnsemblePrediction, HaltingTrace]:
    """Sequential cascade inference on a batch of samples.

    ``eval`` runs model t only on samples still active at step t and stops each
    sample at its first binarized halt. ``train`` runs every model on every sample
    and records soft h, S, p and the per-step soft ensembles; the halting step is
    sampled with Gumbel noise when ``rng`` is given, thresholded otherwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T = len(models)
    if T == 0:
        raise ValueError("infer needs at least one model")
    if T > 1 and selector is None:
        raise ValueError("a selector is required for more than one model")
    if mode == "eval":
        with ng.no_grad():
            return _infer_lazy(models, selector, x)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    with ng.no_grad():
        graph = cascade_forward(models, selector, x)
        h = np.concatenate([t.data for t in graph.h], axis=1)
        if rng is not None:
            hb = np.concatenate(
                [gumbel_binarize(Tensor(h[:, [t]]), temperature, "train", rng).data for t in range(T - 1)]
                + [np.ones((len(x), 1))],
                axis=1,
            )
        else:
            hb = (h >= 0.5).astype(np.float64)
        z = halting_step(hb)
        z = np.atleast_1d(z)
        preds = np.stack([o.main_probs.data for o in graph.outputs], axis=1)
        per_step = np.stack([graph.soft_ensemble(t).data for t in range(1, T + 1)], axis=1)
    csum = np.cumsum(preds, axis=1)
    probs = csum[np.arange(len(x)), z - 1] / z[:, None]
    trace = HaltingTrace(h=h, S=survival_curve(h), p=halting_pmf(h), z=z)
    return EnsemblePrediction(probs, z, per_step), trace


def _infer_lazy(models, selector, x) -> tuple[EnsemblePrediction, HaltingTrace]:
    T = len(models)
    n = len(x)
    num_classes = models[0].num_classes
    sums = np.zeros((n, num_classes))
    z = np.full(n, T, dtype=np.int64)
    hb = np.zeros((n, T))
    active = np.arange(n)
    d = selector.initial_state(n).data if selector is not None and T > 1 else None
    for t in range(T):
        out = models[t](Tensor(x[active]))
        sums[active] += out.main_probs.data
        if t == T - 1:
            hb[active, t] = 1.0
            break
        h, d_new = selector.step(encode_selector_input(out), Tensor(d[active]))
        d[active] = d_new.data
        stop = h.data[:, 0] >= 0.5
        hb[active[stop], t] = 1.0
        z[active[stop]] = t + 1
        active = active[~stop]
        if active.size == 0:
            break
    probs = sums / z[:, None]
    trace = HaltingTrace(h=hb, S=survival_curve(hb), p=halting_pmf(hb), z=z)
    return EnsemblePrediction(probs, z), trace


def write_traces(trace: HaltingTrace, fh: IO[str], extra: dict[str, Sequence] | None = None) -> None:
    """One JSON object per sample; ``extra`` adds per-sample columns such as labels."""
    extra = extra or {}
    for i, rec in enumerate(trace.records()):
        for key, values in extra.items():
            v = values[i]
            rec[key] = v.item() if hasattr(v, "item") else v
        fh.write(json.dumps(rec) + "\n")


def read_traces(fh: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]
