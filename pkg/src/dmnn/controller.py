"""Per-block gate controller.

The controller pools the block input, embeds it, adds the (ReLU-mapped)
hidden state of the previous controller, and emits one off/on logit pair per
gated sub-block. Hard decisions use the Gumbel-max trick during training and
a noiseless argmax at evaluation; gradients reach the logits through the
relaxed softmax (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module, Parameter

OFF, ON = 0, 1
INIT_ON_PROB_LOGIT = 1.7  # sigmoid(1.7) ~= 0.85


def gumbel_sample(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-20, 1 - 1e-7)
    return -np.log(-np.log(u))


@dataclass
class GateDecisions:
    s: Tensor  # [B, N_gated]; forward value exactly 0/1, gradient via ``relaxed``
    relaxed: Tensor  # [B, N_gated] on-probabilities
    mode: str

    @property
    def hard(self) -> np.ndarray:
        return self.s.data


def decide(g: Tensor, mode: str, rng: np.random.Generator | None = None,
           tau: float = 1.0) -> GateDecisions:
    """Hard off/on decision per (sample, sub-block) from logits g of shape [B, N, 2]."""
    if mode == "train":
        noise = gumbel_sample(g.shape, rng).astype(g.dtype)
        perturbed = ad.add(g, Tensor(noise))
    elif mode == "eval":
        perturbed = g
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    probs = ad.softmax(perturbed * (1.0 / tau), axis=-1)
    on = probs[..., ON]
    # ties go to execution
    hard = (perturbed.data[..., ON] >= perturbed.data[..., OFF]).astype(g.dtype)
    return GateDecisions(ad.straight_through(hard, on), on, mode)


def spatial_embed(x: Tensor, w1: Tensor, b1: Tensor | None = None) -> Tensor:
    return ad.relu(ad.linear(ad.global_avg_pool(x), w1, b1))


def state_update(v: Tensor, h_prev: Tensor | None, w2: Tensor | None,
                 b2: Tensor | None = None) -> Tensor:
    if h_prev is None:
        return v
    return v + ad.relu(ad.linear(h_prev, w2, b2))


def category_head(h: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return ad.softmax(ad.linear(h, w, b), axis=-1)


class Controller(Module):
    """Gate controller for one block with ``n_gated`` switchable sub-blocks."""

    def __init__(self, c_in: int, n_gated: int, num_categories: int, first: bool,
                 hidden_dim: int = 32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_gated = n_gated
        self.embed = Linear(c_in, hidden_dim, rng)
        self.prev = None if first else Linear(hidden_dim, hidden_dim, rng)
        self.gate = None
        if n_gated:
            self.gate = Linear(hidden_dim, 2 * n_gated, rng)
            bias = np.zeros((n_gated, 2), dtype=np.float32)
            bias[:, OFF] = -INIT_ON_PROB_LOGIT
            self.gate.bias = Parameter(bias.reshape(-1))
        self.category = Linear(hidden_dim, num_categories, rng)

    def hidden(self, x: Tensor, h_prev: Tensor | None) -> Tensor:
        v = spatial_embed(x, self.embed.weight, self.embed.bias)
        if self.prev is None:
            return v
        return state_update(v, h_prev, self.prev.weight, self.prev.bias)

    def logits(self, h: Tensor) -> Tensor:
        g = self.gate(h)
        return g.reshape(h.shape[0], self.n_gated, 2)

    def category_log_probs(self, h: Tensor) -> Tensor:
        return ad.log_softmax(self.category(h), axis=-1)
