"""Training objectives for the cascade: base, ensemble, cost, rank and their weighted total.

All batch losses return scalar tensors (means over the batch). Gradient routing
is done by detaching: the ensemble and cost terms only reach the selector, the
base term only reaches the current base model, and the rank term reaches both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numgraph as ng
from .halting import CascadeGraph
from .nets import BaseOutput
from .numgraph import Tensor

LOG_EPS = 1e-12


def task_loss(y, probs) -> Tensor:
    """Per-sample cross-entropy -log(probs[y] + eps), shape [batch, 1]."""
    probs = probs if isinstance(probs, Tensor) else Tensor(np.atleast_2d(probs))
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (probs.shape[0],):
        raise ValueError(f"expected {probs.shape[0]} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= probs.shape[1]:
        raise ValueError(f"labels must be integers in [0, {probs.shape[1]}), got {y}")
    return -ng.log(ng.pick(probs, y) + LOG_EPS)


def base_loss(out: BaseOutput, y, lambda_dis: float = 0.01) -> Tensor:
    """CE of both heads minus the weighted L1 distance between them."""
    ce = task_loss(y, out.main_probs) + task_loss(y, out.aux_probs)
    l1 = ng.sum(ng.abs_diff(out.main_probs, out.aux_probs), axis=1, keepdims=True)
    return ng.mean(ce - lambda_dis * l1)


def ensemble_loss(soft_ensemble: Tensor, y) -> Tensor:
    """Task loss of the survival-weighted ensemble; predictions must come in detached."""
    return ng.mean(task_loss(y, soft_ensemble))


def cost_loss(pmf) -> Tensor:
    """Expected halting step sum_t t * p_t, averaged over the batch.

    ``pmf`` is a list of [batch, 1] tensors (one per step) or a [batch, T] array.
    """
    if isinstance(pmf, (list, tuple)):
        total = None
        for t, p in enumerate(pmf, start=1):
            term = ng.mul(p, float(t))
            total = term if total is None else total + term
        return ng.mean(total)
    p = pmf if isinstance(pmf, Tensor) else Tensor(np.atleast_2d(pmf))
    steps = np.arange(1, p.shape[1] + 1, dtype=np.float64)
    return ng.mean(ng.sum(p * steps, axis=1))


def rank_loss(surv_t, loss_t, ref_loss_prev) -> Tensor:
    """Mean of max(0, S(t) * (loss_t - ref)); ``ref`` is treated as a constant target."""
    ref = ng.detach(ref_loss_prev) if isinstance(ref_loss_prev, Tensor) else Tensor(ref_loss_prev)
    return ng.mean(ng.clamp_min0(ng.mul(surv_t, ng.sub(loss_t, ref))))


@dataclass
class LossWeights:
    ens: float = 0.1
    cost: float = 1e-3
    rank: float = 0.1

    def __post_init__(self):
        for name in ("ens", "cost", "rank"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")


@dataclass
class LossBundle:
    total: Tensor
    base: float
    ens: float = 0.0
    cost: float = 0.0
    rank: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "base": self.base,
            "ens": self.ens,
            "cost": self.cost,
            "rank": self.rank,
        }


def total_loss(graph: CascadeGraph, y, stage: int, weights: LossWeights, lambda_dis: float = 0.01) -> LossBundle:
    """Weighted objective for stage ``stage`` (1-based) from a forward pass over models 1..stage."""
    if stage != len(graph.outputs):
        raise ValueError(f"graph covers {len(graph.outputs)} steps, stage is {stage}")
    base = base_loss(graph.outputs[-1], y, lambda_dis)
    if stage == 1:
        return LossBundle(total=base, base=base.item(), weights=weights)
    ens = ensemble_loss(graph.soft_ensemble(stage), y)
    cost = cost_loss(graph.pmf)
    own = task_loss(y, graph.outputs[-1].main_probs)
    ref = task_loss(y, graph.soft_ensemble(stage - 1))
    rank = rank_loss(graph.survival[stage - 1], own, ref)
    total = base + weights.ens * ens + weights.cost * cost + weights.rank * rank
    return LossBundle(
        total=total,
        base=base.item(),
        ens=ens.item(),
        cost=cost.item(),
        rank=rank.item(),
        weights=weights,
    )
