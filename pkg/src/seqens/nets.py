"""Dual-head base classifiers, the recurrent halting selector, and Gumbel binarization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import numgraph as ng
from .numgraph import Tensor

KL_EPS = 1e-12
CELL_VARIANT = "gru"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Module:
    """Parameter bookkeeping shared by the base model and the selector."""

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ng.ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        ng.zero_grad(self.parameters())

    def requires_grad_(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def round_to_float32(self) -> None:
        """Quantize parameters to float32-representable values (checkpoint precision)."""
        for p in self.parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)


@dataclass
class BaseOutput:
    """Per-sample outputs of a base model; each field is a [batch, ...] tensor."""

    main_probs: Tensor
    aux_probs: Tensor
    kl_uncertainty: Tensor  # [batch, 1]


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p || q) in nats, with an epsilon floor inside both logs."""
    log_ratio = ng.log(p + KL_EPS) - ng.log(q + KL_EPS)
    return ng.sum(p * log_ratio, axis=1, keepdims=True)


class BaseModel(Module):
    """MLP trunk shared by a main and an auxiliary softmax head."""

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        hidden: Sequence[int] = (64, 64),
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden = tuple(int(h) for h in hidden)
        widths = (input_dim,) + self.hidden
        self.trunk = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        feature_dim = widths[-1]
        self.main_head = Linear(feature_dim, num_classes, rng)
        self.aux_head = Linear(feature_dim, num_classes, rng)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.trunk):
            yield from layer.named_parameters(f"trunk.{i}")
        yield from self.main_head.named_parameters("main_head")
        yield from self.aux_head.named_parameters("aux_head")

    def features(self, x: Tensor) -> Tensor:
        for layer in self.trunk:
            x = ng.tanh(layer(x))
        return x

    def __call__(self, x) -> BaseOutput:
        return base_forward(self, x)


def base_forward(model: BaseModel, x) -> BaseOutput:
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.data.ndim != 2 or x.shape[1] != model.input_dim:
        raise ng.ShapeError(f"base_forward: expected input [batch, {model.input_dim}], got {x.shape}")
    feats = model.features(x)
    main = ng.softmax(model.main_head(feats))
    aux = ng.softmax(model.aux_head(feats))
    return BaseOutput(main, aux, kl_divergence(main, aux))


def encode_selector_input(out: BaseOutput) -> Tensor:
    """[main_probs | aux_probs | kl] per row, width 2 * num_classes + 1."""
    return ng.concat([out.main_probs, out.aux_probs, out.kl_uncertainty], axis=1)


class Selector(Module):
    """GRU cell over encoded base outputs with a sigmoid halting head."""

    def __init__(self, input_dim: int, hidden_dim: int = 32, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.cell_variant = CELL_VARIANT
        # gates: update (z), reset (r), candidate (n)
        self.x_z = Linear(input_dim, hidden_dim, rng)
        self.h_z = Linear(hidden_dim, hidden_dim, rng)
        self.x_r = Linear(input_dim, hidden_dim, rng)
        self.h_r = Linear(hidden_dim, hidden_dim, rng)
        self.x_n = Linear(input_dim, hidden_dim, rng)
        self.h_n = Linear(hidden_dim, hidden_dim, rng)
        self.halt_head = Linear(hidden_dim, 1, rng)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("x_z", "h_z", "x_r", "h_r", "x_n", "h_n", "halt_head"):
            yield from getattr(self, name).named_parameters(name)

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_dim)))

    def step(self, e: Tensor, d_prev: Tensor) -> tuple[Tensor, Tensor]:
        return selector_step(self, e, d_prev)


def selector_step(sel: Selector, e: Tensor, d_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrent step: returns (h_t of shape [batch, 1], new hidden state)."""
    z = ng.sigmoid(sel.x_z(e) + sel.h_z(d_prev))
    r = ng.sigmoid(sel.x_r(e) + sel.h_r(d_prev))
    n = ng.tanh(sel.x_n(e) + r * sel.h_n(d_prev))
    d = (1.0 - z) * n + z * d_prev
    h = ng.sigmoid(sel.halt_head(d))
    return h, d


def gumbel_binarize(h: Tensor, temperature: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Binarize halting probabilities.

    ``train``: draw a binary Gumbel-Softmax sample over {halt, continue} with
    logits (log h, log(1-h)), threshold the relaxed value at 0.5 and pass
    gradients through the relaxed value. ``eval``: deterministic ``h >= 0.5``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    h = h if isinstance(h, Tensor) else Tensor(h)
    if mode == "eval":
        return Tensor((h.data >= 0.5).astype(np.float64))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode binarization needs an rng")
    u = rng.uniform(size=(2,) + h.shape)
    g = -np.log(-np.log(u + 1e-20) + 1e-20)
    # softmax over two classes == sigmoid of the logit difference
    logit = ng.log(h + KL_EPS) - ng.log(1.0 - h + KL_EPS)
    relaxed = ng.sigmoid((logit + (g[0] - g[1])) * (1.0 / temperature))
    hard = (relaxed.data >= 0.5).astype(np.float64)
    return ng.straight_through(relaxed, hard)
