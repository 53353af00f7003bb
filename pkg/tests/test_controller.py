import math

import numpy as np
import pytest

from dmnn import autodiff as ad
from dmnn.autodiff import Tensor, grad_check
from dmnn.controller import (Controller, category_head, decide, gumbel_sample, spatial_embed,
                             state_update)
from dmnn.network import DmnnNetwork
from dmnn.topology import make_preset


def test_spatial_embed_zero_weights():
    v = spatial_embed(Tensor(np.full((2, 3, 4, 4), 3.0)), Tensor(np.zeros((5, 3))), Tensor(np.zeros(5)))
    assert not v.data.any()


def test_spatial_embed_channel_means():
    x = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 2.0)])[None]
    v = spatial_embed(Tensor(x), Tensor(np.ones((1, 2))), Tensor(np.zeros(1)))
    assert v.data[0, 0] == 3.0


def test_spatial_embed_oracle():
    rng = np.random.default_rng(13)
    x, w, b = rng.standard_normal((3, 4, 5, 5)), rng.standard_normal((6, 4)), rng.standard_normal(6)
    expected = np.maximum(x.mean(axis=(2, 3)) @ w.T + b, 0)
    np.testing.assert_allclose(spatial_embed(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-6)


def test_state_update_first_and_zero():
    v = Tensor(np.arange(6.0).reshape(2, 3))
    assert state_update(v, None, None) is v
    h = state_update(v, Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 3))), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(h.data, v.data)


def test_state_update_oracle():
    rng = np.random.default_rng(17)
    v, hp, w, b = (rng.standard_normal(s) for s in [(4, 5), (4, 5), (5, 5), (5,)])
    expected = v + np.maximum(hp @ w.T + b, 0)
    np.testing.assert_allclose(state_update(Tensor(v), Tensor(hp), Tensor(w), Tensor(b)).data, expected,
                               atol=1e-6)


def test_category_head():
    p = category_head(Tensor(np.ones((2, 4))), Tensor(np.zeros((20, 4))), Tensor(np.zeros(20)))
    np.testing.assert_allclose(p.data, 1 / 20)
    rng = np.random.default_rng(23)
    h, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    z = h @ w.T + b
    expected = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(category_head(Tensor(h), Tensor(w), Tensor(b)).data, expected, atol=1e-6)


def test_gumbel_at_inverse_e_is_zero():
    class Fixed:
        def random(self, shape):
            return np.full(shape, 1 / math.e)

    assert gumbel_sample((3,), Fixed()) == pytest.approx([0.0] * 3, abs=1e-12)


def test_gumbel_moments():
    d = gumbel_sample(1_000_000, np.random.default_rng(0))
    assert d.mean() == pytest.approx(np.euler_gamma, abs=0.01)
    assert d.var() == pytest.approx(math.pi ** 2 / 6, abs=0.02)


def on_off_logits(on: float, off: float, b: int = 1, n: int = 1) -> Tensor:
    g = np.zeros((b, n, 2))
    g[..., 0], g[..., 1] = off, on
    return Tensor(g)


def test_gumbel_max_probability():
    dec = decide(on_off_logits(math.log(2), 0.0, b=100_000), "train", np.random.default_rng(1))
    assert dec.hard.mean() == pytest.approx(2 / 3, abs=0.01)


@pytest.mark.parametrize("on", [-1.5, 0.3, 2.0])
def test_gumbel_max_matches_softmax_within_3_sigma(on):
    n = 100_000
    dec = decide(on_off_logits(on, 0.0, b=n), "train", np.random.default_rng(5))
    p = 1 / (1 + math.exp(-on))
    assert abs(dec.hard.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_hard_values_are_binary():
    g = Tensor(np.random.default_rng(0).standard_normal((50, 3, 2)))
    assert set(np.unique(decide(g, "train", np.random.default_rng(0)).hard)) <= {0.0, 1.0}


def test_eval_is_noiseless_and_ties_execute():
    assert decide(on_off_logits(1.0, 0.5), "eval").hard[0, 0] == 1
    assert decide(on_off_logits(0.0, 0.5), "eval").hard[0, 0] == 0
    assert decide(on_off_logits(0.25, 0.25), "eval").hard[0, 0] == 1
    g = Tensor(np.random.default_rng(2).standard_normal((8, 2, 2)))
    assert np.array_equal(decide(g, "eval").hard, decide(g, "eval").hard)


def test_straight_through_forward_is_hard_and_grad_is_relaxed():
    g0 = np.random.default_rng(3).standard_normal((4, 3, 2))
    g = Tensor(g0.copy(), requires_grad=True)
    dec = decide(g, "eval")
    np.testing.assert_array_equal(dec.s.data, (g0[..., 1] >= g0[..., 0]).astype(g0.dtype))
    dec.s.sum().backward()
    p = np.exp(g0[..., 1]) / np.exp(g0).sum(axis=-1)
    expected = np.stack([-p * (1 - p), p * (1 - p)], axis=-1)
    np.testing.assert_allclose(g.grad, expected, atol=1e-12)


def test_relaxed_gate_path_grad_check():
    """Logits -> controller relaxed on-probability, with noise drawn once and held fixed."""
    rng = np.random.default_rng(4)
    x, w1, b1, w3, b3 = (rng.standard_normal(s) for s in [(2, 3, 3, 3), (4, 3), (4,), (4, 4), (4,)])
    noise = rng.gumbel(size=(2, 2, 2))

    def relaxed(x_, w1_, b1_, w3_, b3_):
        h = spatial_embed(x_, w1_, b1_)
        g = ad.linear(h, w3_, b3_).reshape(2, 2, 2) + Tensor(noise)
        return ad.softmax(g, axis=-1)[..., 1]

    assert grad_check(relaxed, [x, w1, b1, w3, b3]) < 1e-4


def test_initial_on_probability():
    ctrl = Controller(8, 3, 5, first=True, rng=np.random.default_rng(0))
    h = Tensor(np.zeros((1, 32), np.float32))
    g = ctrl.logits(h).data[0]
    p_on = 1 / (1 + np.exp(g[:, 0] - g[:, 1]))
    np.testing.assert_allclose(p_on, 0.85, atol=0.005)


def test_controller_shapes():
    ctrl = Controller(8, 2, 5, first=False, rng=np.random.default_rng(0))
    x = Tensor(np.ones((3, 8, 4, 4), np.float32))
    h = ctrl.hidden(x, Tensor(np.ones((3, 32), np.float32)))
    assert h.shape == (3, 32)
    assert ctrl.logits(h).shape == (3, 2, 2)
    assert ctrl.category_log_probs(h).shape == (3, 5)


def test_causality_later_parameters_do_not_affect_earlier_decisions():
    net = DmnnNetwork(make_preset("dmnn8-synthetic"), seed=0)
    x = np.random.default_rng(9).standard_normal((6, 3, 16, 16)).astype(np.float32)
    before = net.forward(x, "train", rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for p in net.controllers[2].parameters() + net.blocks[2].parameters():
        p.data = rng.permutation(p.data.reshape(-1)).reshape(p.data.shape)
    after = net.forward(x, "train", rng=np.random.default_rng(1))
    for l in (0, 1):
        assert before.executed[l].tobytes() == after.executed[l].tobytes()


def test_eval_decisions_deterministic():
    net = DmnnNetwork(make_preset("dmnn8-synthetic"), seed=0)
    x = np.random.default_rng(10).standard_normal((4, 3, 16, 16)).astype(np.float32)
    a, b = net.forward(x, "eval"), net.forward(x, "eval")
    assert all(np.array_equal(u, v) for u, v in zip(a.executed, b.executed))
