import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqens.halting import cascade_forward, halting_pmf
from seqens.losses import LossWeights, base_loss, cost_loss, ensemble_loss, rank_loss, task_loss, total_loss
from seqens.nets import BaseOutput
from seqens.numgraph import Tensor

from .helpers import tiny_cascade


def test_task_loss_is_negative_log_probability():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    out = task_loss(np.array([0, 2]), probs).data
    np.testing.assert_allclose(out[:, 0], -np.log([0.7, 0.8]), rtol=1e-10)


def test_task_loss_validates_labels():
    probs = np.full((2, 3), 1 / 3)
    with pytest.raises(ValueError):
        task_loss(np.array([0, 3]), probs)
    with pytest.raises(ValueError):
        task_loss(np.array([0]), probs)
    with pytest.raises(ValueError):
        task_loss(np.array([0.0, 1.0]), probs)


def test_base_loss_matches_numpy():
    main = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    aux = np.array([[0.5, 0.25, 0.25], [0.1, 0.7, 0.2]])
    y = np.array([0, 1])
    out = BaseOutput(Tensor(main), Tensor(aux), Tensor(np.zeros((2, 1))))
    ce = -np.log(main[[0, 1], y]) - np.log(aux[[0, 1], y])
    l1 = np.abs(main - aux).sum(axis=1)
    expected = np.mean(ce - 0.05 * l1)
    assert base_loss(out, y, lambda_dis=0.05).item() == pytest.approx(expected, rel=1e-10)


def test_ensemble_loss_value():
    ens = Tensor(np.array([[0.25, 0.75]]))
    assert ensemble_loss(ens, np.array([1])).item() == pytest.approx(-np.log(0.75))


pmfs = st.integers(1, 6).flatmap(lambda T: arrays(np.float64, (3, T), elements=st.floats(0.0, 1.0)))


@settings(max_examples=100, deadline=None)
@given(pmfs)
def test_cost_loss_in_range_and_forms_agree(h):
    p = halting_pmf(h)
    T = p.shape[1]
    value = cost_loss(p).item()
    assert 1.0 - 1e-12 <= value <= T + 1e-12
    columns = [Tensor(p[:, [t]]) for t in range(T)]
    assert cost_loss(columns).item() == pytest.approx(value, rel=1e-12)
    assert value == pytest.approx(np.mean(p @ np.arange(1, T + 1)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (5, 1), elements=st.floats(0.0, 1.0)),
    arrays(np.float64, (5, 1), elements=st.floats(0.0, 10.0)),
    arrays(np.float64, (5, 1), elements=st.floats(0.0, 10.0)),
)
def test_rank_loss_nonnegative_and_zero_on_improvement(s, own, ref):
    assert rank_loss(Tensor(s), Tensor(own), Tensor(ref)).item() >= 0.0
    better = np.minimum(own, ref)
    assert rank_loss(Tensor(s), Tensor(better), Tensor(ref)).item() == 0.0


def test_rank_loss_value():
    s = Tensor(np.array([[0.5], [1.0]]))
    own = Tensor(np.array([[2.0], [0.5]]))
    ref = Tensor(np.array([[1.0], [1.0]]))
    assert rank_loss(s, own, ref).item() == pytest.approx(0.25)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(ens=-1.0)


def test_total_loss_stage_one_is_base_only():
    models, selector, x, y = tiny_cascade(T=1)
    graph = cascade_forward(models, None, x)
    bundle = total_loss(graph, y, stage=1, weights=LossWeights())
    assert bundle.total.item() == bundle.base
    assert bundle.ens == bundle.cost == bundle.rank == 0.0


def test_total_loss_combines_terms():
    models, selector, x, y = tiny_cascade(T=3)
    graph = cascade_forward(models, selector, x)
    w = LossWeights(ens=0.3, cost=0.02, rank=0.5)
    b = total_loss(graph, y, stage=3, weights=w, lambda_dis=0.01)
    assert b.total.item() == pytest.approx(b.base + 0.3 * b.ens + 0.02 * b.cost + 0.5 * b.rank, rel=1e-12)
    assert set(b.as_dict()) == {"total", "base", "ens", "cost", "rank"}
    with pytest.raises(ValueError):
        total_loss(graph, y, stage=2, weights=w)
