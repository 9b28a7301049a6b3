"""Stage-wise joint training of the base models and the shared selector."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numgraph as ng
from .datahub import Dataset, substream
from .halting import cascade_forward
from .losses import LossWeights, total_loss
from .nets import BaseModel, BaseOutput, Selector
from .numgraph import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class MilestoneSchedule:
    """Multiply the base rate by ``factor`` once for every milestone epoch reached."""

    def __init__(self, base_lr: float, milestones: Sequence[int], factor: float):
        if base_lr <= 0 or not 0 < factor <= 1:
            raise ValueError(f"invalid schedule: base_lr={base_lr} factor={factor}")
        self.base_lr = base_lr
        self.milestones = sorted(milestones)
        self.factor = factor

    def lr(self, epoch: int) -> float:
        crossed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.factor**crossed


class SGD:
    """Momentum SGD with L2 weight decay (optionally Nesterov)."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0, nesterov: bool = False):
        if lr <= 0 or momentum < 0 or weight_decay < 0:
            raise ValueError(f"invalid SGD hyperparameters lr={lr} momentum={momentum} weight_decay={weight_decay}")
        if nesterov and momentum == 0:
            raise ValueError("nesterov momentum needs momentum > 0")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = g + self.momentum * v if self.nesterov else v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        ng.zero_grad(self.params)


class Adam:
    """Adam with bias correction and L2 weight decay added to the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0 or weight_decay < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError(f"invalid Adam hyperparameters lr={lr} betas={betas} weight_decay={weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        ng.zero_grad(self.params)


SELECTOR_LR_DECAYS = (0.1, 0.2, 0.5, 0.8)


@dataclass
class TrainConfig:
    stages: int = 3
    epochs: int = 30
    batch_size: int = 128
    hidden: tuple[int, ...] = (64, 64)
    selector_hidden: int = 32
    # base models
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (0.3, 0.6, 0.8)  # fractions of the epoch budget
    lr_divisor: float = 5.0
    # selector
    selector_lr: float = 3e-2
    selector_weight_decay: float = 0.0
    selector_lr_decay: float = 0.5
    # objective
    w_ens: float = 0.1
    w_cost: float = 1e-3
    w_rank: float = 0.1
    lambda_dis: float = 0.01
    halt_sampling: str = "soft"  # soft | gumbel
    temperature: float = 1.0
    temperature_final: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.milestones = tuple(float(m) for m in self.milestones)
        errors = self.validation_errors()
        if errors:
            raise ValueError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errs = []
        if self.stages < 1:
            errs.append(f"stages must be >= 1, got {self.stages}")
        if self.epochs < 1:
            errs.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            errs.append(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("base_lr", "selector_lr", "temperature", "lr_divisor"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0, got {getattr(self, name)}")
        if self.temperature_final is not None and not self.temperature_final > 0:
            errs.append(f"temperature_final must be > 0, got {self.temperature_final}")
        for name in ("w_ens", "w_cost", "w_rank", "lambda_dis", "weight_decay", "selector_weight_decay", "momentum"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.selector_lr_decay <= 1:
            errs.append(f"selector_lr_decay must be in (0, 1], got {self.selector_lr_decay}")
        if self.halt_sampling not in ("soft", "gumbel"):
            errs.append(f"halt_sampling must be 'soft' or 'gumbel', got {self.halt_sampling!r}")
        if any(not 0 < m < 1 for m in self.milestones):
            errs.append(f"milestones are epoch fractions in (0, 1), got {self.milestones}")
        return errs

    @property
    def weights(self) -> LossWeights:
        return LossWeights(ens=self.w_ens, cost=self.w_cost, rank=self.w_rank)

    def milestone_epochs(self) -> list[int]:
        return sorted({max(1, round(f * self.epochs)) for f in self.milestones})

    def temperature_at(self, progress: float) -> float:
        if self.temperature_final is None:
            return self.temperature
        return self.temperature + (self.temperature_final - self.temperature) * progress

    def as_dict(self) -> dict:
        return asdict(self)


def make_base_optimizer(params: Sequence[Tensor], cfg: TrainConfig) -> tuple[SGD, MilestoneSchedule]:
    opt = SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, nesterov=cfg.nesterov and cfg.momentum > 0)
    return opt, MilestoneSchedule(cfg.base_lr, cfg.milestone_epochs(), 1.0 / cfg.lr_divisor)


def make_selector_optimizer(params: Sequence[Tensor], cfg: TrainConfig) -> tuple[Adam, MilestoneSchedule]:
    opt = Adam(params, lr=cfg.selector_lr, weight_decay=cfg.selector_weight_decay)
    return opt, MilestoneSchedule(cfg.selector_lr, cfg.milestone_epochs(), cfg.selector_lr_decay)


def parameter_checksum(module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    models: list[BaseModel]
    selector: Selector
    log: list[dict] = field(default_factory=list)
    checksums: dict[int, str] = field(default_factory=dict)  # stage -> checksum of models 1..stage-1 at stage start


def _train_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.subset("train")
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _slice_output(out: BaseOutput, idx: np.ndarray) -> BaseOutput:
    return BaseOutput(Tensor(out.main_probs.data[idx]), Tensor(out.aux_probs.data[idx]), Tensor(out.kl_uncertainty.data[idx]))


class _Frozen:
    """Stand-in for an already-trained model whose outputs on the train set are cached."""

    def __init__(self, out: BaseOutput):
        self.out = out
        self.idx: np.ndarray | None = None

    def __call__(self, x) -> BaseOutput:
        return _slice_output(self.out, self.idx)


def train_sequential(
    cfg: TrainConfig,
    data,
    num_classes: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train T base models one stage at a time together with the shared selector.

    Stage t trains model t and the selector; models 1..t-1 stay frozen. A fresh
    optimizer and schedule are built for both at every stage.
    """
    x, y = _train_xy(data)
    k = num_classes if num_classes is not None else (data.num_classes if isinstance(data, Dataset) else int(y.max()) + 1)
    init_rng = substream(cfg.seed, "init")
    order_rng = substream(cfg.seed, "order")
    gumbel_rng = substream(cfg.seed, "gumbel")
    models = [BaseModel(x.shape[1], k, cfg.hidden, rng=init_rng) for _ in range(cfg.stages)]
    selector = Selector(2 * k + 1, cfg.selector_hidden, rng=init_rng)
    result = TrainResult(models, selector)
    total_epochs = cfg.stages * cfg.epochs
    n = len(y)

    for stage in range(1, cfg.stages + 1):
        for m in models:
            m.requires_grad_(False)
        current = models[stage - 1]
        current.requires_grad_(True)
        selector.requires_grad_(stage > 1)
        result.checksums[stage] = _prefix_checksum(models[: stage - 1])

        with ng.no_grad():
            frozen = [_Frozen(m(Tensor(x))) for m in models[: stage - 1]]
        cascade = frozen + [current]

        base_opt, base_sched = make_base_optimizer(current.parameters(), cfg)
        sel_opt, sel_sched = make_selector_optimizer(selector.parameters(), cfg)

        for epoch in range(cfg.epochs):
            base_opt.lr = base_sched.lr(epoch)
            sel_opt.lr = sel_sched.lr(epoch)
            temperature = cfg.temperature_at(((stage - 1) * cfg.epochs + epoch) / max(1, total_epochs - 1))
            sums = {"total": 0.0, "base": 0.0, "ens": 0.0, "cost": 0.0, "rank": 0.0}
            order = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                for f in frozen:
                    f.idx = idx
                graph = cascade_forward(
                    cascade,
                    selector,
                    Tensor(x[idx]),
                    stages=stage,
                    binarize="gumbel" if cfg.halt_sampling == "gumbel" else None,
                    temperature=temperature,
                    rng=gumbel_rng,
                )
                bundle = total_loss(graph, y[idx], stage, cfg.weights, cfg.lambda_dis)
                values = bundle.as_dict()
                if not all(math.isfinite(v) for v in values.values()):
                    raise TrainingDiverged(f"non-finite loss at stage {stage}, epoch {epoch + 1}: {values}")
                base_opt.zero_grad()
                sel_opt.zero_grad()
                bundle.total.backward()
                base_opt.step()
                if stage > 1:
                    sel_opt.step()
                for key in sums:
                    sums[key] += values[key] * len(idx)
            row = {"stage": stage, "epoch": epoch + 1, **{k_: v / n for k_, v in sums.items()}}
            row.update(base_lr=base_opt.lr, selector_lr=sel_opt.lr if stage > 1 else 0.0, temperature=temperature)
            result.log.append(row)
            log.debug("stage %d epoch %d: %s", stage, epoch + 1, row)
            if on_epoch is not None:
                on_epoch(row)
        if _prefix_checksum(models[: stage - 1]) != result.checksums[stage]:
            raise AssertionError(f"frozen models changed during stage {stage}")

    for m in models:
        m.requires_grad_(True)
    selector.requires_grad_(True)
    return result


def _prefix_checksum(models: Sequence[BaseModel]) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(parameter_checksum(m).encode())
    return h.hexdigest()


def train_pool(cfg: TrainConfig, data, size: int | None = None, num_classes: int | None = None) -> list[BaseModel]:
    """Independently initialised base models trained on the base objective alone."""
    size = cfg.stages if size is None else size
    models = []
    for i in range(size):
        member_cfg = replace(cfg, stages=1, seed=_member_seed(cfg.seed, i))
        models.append(train_sequential(member_cfg, data, num_classes=num_classes).models[0])
    return models


def _member_seed(seed: int, index: int) -> int:
    return int(substream(seed, f"pool.{index}").integers(0, 2**31 - 1))


def sample_hyperparameters(rng: np.random.Generator) -> dict:
    """Draw selector/loss settings from the tuning ranges (log-uniform rates and weights)."""

    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    return {
        "selector_lr": log_uniform(1e-5, 1e-1),
        "selector_lr_decay": float(rng.choice(SELECTOR_LR_DECAYS)),
        "w_ens": log_uniform(1e-4, 0.1),
        "w_cost": log_uniform(1e-5, 0.1),
        "w_rank": log_uniform(1e-4, 0.1),
    }


def random_search(
    cfg: TrainConfig,
    data,
    objective: Callable[[TrainResult], float],
    trials: int = 24,
    seed: int | None = None,
) -> tuple[dict, list[tuple[dict, float]]]:
    """Random search over the selector/loss hyperparameters; returns (best params, all trials)."""
    rng = substream(cfg.seed if seed is None else seed, "search")
    history = []
    best, best_score = None, -math.inf
    for _ in range(trials):
        params = sample_hyperparameters(rng)
        try:
            score = objective(train_sequential(replace(cfg, **params), data))
        except TrainingDiverged:
            score = -math.inf
        history.append((params, score))
        if score > best_score:
            best, best_score = params, score
    return best, history
