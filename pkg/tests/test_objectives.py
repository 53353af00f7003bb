import math

import numpy as np
import pytest

from dmnn import autodiff as ad
from dmnn.autodiff import Tensor, grad_check
from dmnn.objectives import (BatchGateStats, LossWeights, ResourceConfig, actual_flops, category_loss,
                             exec_loss, execution_rate, flops_loss, stage_weights, total_loss)
from dmnn.topology import BlockFlops, FlopsTable, make_preset


def table(*blocks, stem=0, head=0):
    return FlopsTable(stem, tuple(BlockFlops(tuple(b), (False,) * len(b), 0, 0, 1, 1) for b in blocks), head)


def test_resource_config():
    assert ResourceConfig(0.7).e == 0.7
    with pytest.raises(ValueError):
        ResourceConfig(0.0)
    with pytest.raises(ValueError):
        ResourceConfig(1.2)


def test_stage_weights():
    assert stage_weights(make_preset("dmnn50-imagenet")) == pytest.approx([1e-4] * 3 + [1e-3] * 4 + [1e-2] * 6
                                                                          + [1e-1] * 3)
    assert sorted(set(stage_weights(make_preset("dmnn20-cifar")))) == pytest.approx([1e-4, 1e-3, 1e-2])


def test_execution_rate_examples():
    assert execution_rate(np.array([2.0, 1.0]), 2).item() == pytest.approx(0.75)
    assert execution_rate(np.array([4.0, 4.0]), 4).item() == 1.0
    assert execution_rate(np.array([0.0, 0.0]), 4).item() == 0.0


def test_execution_rate_from_gate_matrix():
    stats = BatchGateStats.from_gates([np.array([[1, 1], [1, 0]])])
    assert execution_rate(stats.counts[0], stats.batch_size).item() == pytest.approx(0.75)


def test_exec_loss_examples():
    assert exec_loss([0.7, 0.7], 0.7).item() == 0.0
    assert exec_loss([0.5], 0.7).item() == pytest.approx(0.04)


def test_actual_flops_examples():
    stats = BatchGateStats.from_gates([np.array([[1, 1], [1, 0]])])
    assert actual_flops(stats, table([100, 100])).item() == pytest.approx(150)
    off = BatchGateStats.from_gates([np.zeros((3, 2))])
    assert actual_flops(off, table([100, 100])).item() == 0.0


def test_actual_flops_matches_per_sample_sum():
    rng = np.random.default_rng(41)
    costs = [rng.integers(1, 1000, 3) for _ in range(4)]
    gates = [rng.integers(0, 2, (8, 3)) for _ in range(4)]
    t = table(*costs, stem=500, head=70)
    per_sample = [500 + 70 + sum(int(g[b] @ c) for g, c in zip(gates, costs)) for b in range(8)]
    assert actual_flops(BatchGateStats.from_gates(gates), t).item() == pytest.approx(np.mean(per_sample), rel=1e-6)
    np.testing.assert_allclose(t.sample_flops(gates), per_sample)


def test_flops_loss_examples():
    assert flops_loss(70.0, 100.0, 0.7).item() == pytest.approx(0.0, abs=1e-12)
    assert flops_loss(80.0, 100.0, 0.7).item() == pytest.approx(0.01)
    assert flops_loss(30.0, 100.0, 0.7).item() == pytest.approx(0.16)


def test_category_loss_perfect_and_single():
    labels = np.array([0, 2])
    perfect = Tensor(np.log(np.array([[1.0, 1e-300, 1e-300], [1e-300, 1e-300, 1.0]])))
    assert category_loss([perfect, perfect], labels, [1.0, 1.0]).item() == pytest.approx(0.0, abs=1e-9)
    logits = np.random.default_rng(0).standard_normal((2, 3))
    lp = ad.log_softmax(Tensor(logits))
    assert category_loss([lp], labels, [1.0]).item() == pytest.approx(ad.cross_entropy(Tensor(logits), labels).item())


def test_category_loss_uniform_dmnn50():
    alphas = stage_weights(make_preset("dmnn50-imagenet"))
    assert sum(alphas) == pytest.approx(0.3643)
    uniform = Tensor(np.full((4, 20), math.log(1 / 20)))
    got = category_loss([uniform] * 16, np.array([0, 5, 10, 19]), alphas).item()
    assert got == pytest.approx(0.3643 * math.log(20), rel=1e-6)
    # 0.3643 * ln 20 = 1.09134, quoted to four places as 1.0915
    assert got == pytest.approx(1.0915, abs=5e-4)


def test_total_loss_examples():
    assert total_loss(0.0, 0.0, 0.0, 0.0).item() == 0.0
    assert total_loss(1.0, 0.5, 0.04, 0.01).item() == pytest.approx(1.55)


def test_total_loss_resource_decomposition():
    got = total_loss(3.0, 2.0, 0.04, 0.01, LossWeights(ctg=0.0, res=1.0, cls=0.0)).item()
    assert got == pytest.approx(0.05)


def test_total_loss_without_category_supervision():
    assert total_loss(1.0, None, 0.04, 0.01).item() == pytest.approx(1.05)


def resource_loss(t, gates):
    stats = BatchGateStats.from_gates(gates)
    z = [execution_rate(c, stats.batch_size) for c in stats.counts]
    return exec_loss(z, 0.6) + flops_loss(actual_flops(stats, t), t.f_total, 0.6)


def test_resource_losses_grad_check_wrt_relaxed_probabilities():
    rng = np.random.default_rng(6)
    probs = [rng.uniform(0.1, 0.9, (4, 2)) for _ in range(3)]
    t = table([120, 80], [60, 60], [30, 90], stem=40, head=10)
    assert grad_check(lambda *r: resource_loss(t, list(r)), probs) < 1e-4


def test_straight_through_counts_pass_hard_gradient_to_relaxed():
    rng = np.random.default_rng(7)
    probs = [rng.uniform(0.1, 0.9, (4, 2)) for _ in range(3)]
    hard = [(p > 0.5).astype(np.float64) for p in probs]
    t = table([120, 80], [60, 60], [30, 90], stem=40, head=10)
    relaxed = [Tensor(p, requires_grad=True) for p in probs]
    st_loss = resource_loss(t, [ad.straight_through(h, r) for h, r in zip(hard, relaxed)])
    hard_leaves = [Tensor(h, requires_grad=True) for h in hard]
    ref_loss = resource_loss(t, hard_leaves)
    assert st_loss.item() == pytest.approx(ref_loss.item(), rel=1e-12)
    st_loss.backward()
    ref_loss.backward()
    for r, h in zip(relaxed, hard_leaves):
        np.testing.assert_allclose(r.grad, h.grad, rtol=1e-12)
        assert np.abs(r.grad).max() > 0
