"""Training objectives: execution-rate and FLOPs budgets, controller category loss, total loss.

Gate counts are straight-through tensors: their forward values are the hard
executed counts, their gradients flow through the relaxed on-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .topology import FlopsTable, NetworkSpec


@dataclass(frozen=True)
class ResourceConfig:
    r: float

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise ValueError(f"target FLOPs rate must lie in (0, 1], got {self.r}")

    @property
    def e(self) -> float:
        return self.r


@dataclass(frozen=True)
class LossWeights:
    ctg: float = 1.0
    res: float = 1.0
    cls: float = 1.0


def stage_weights(spec: NetworkSpec, first: float = 1e-4, factor: float = 10.0) -> list[float]:
    """Per-controller category-loss weights: ``first`` in stage 1, times ``factor`` per later stage."""
    return [first * factor ** (b.stage_index - 1) for b in spec.blocks]


@dataclass
class BatchGateStats:
    counts: list[Tensor]  # per block: [N] executed count of each sub-block in the batch
    batch_size: int

    @classmethod
    def from_gates(cls, gates: Sequence) -> "BatchGateStats":
        """Build from per-block [B, N] 0/1 arrays or straight-through tensors."""
        gates = [g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float32)) for g in gates]
        return cls([g.sum(axis=0) for g in gates], gates[0].shape[0])


def execution_rate(counts, batch_size: int) -> Tensor:
    counts = ad._as_tensor(counts)
    n = counts.shape[0]
    return counts.sum() * (1.0 / (batch_size * n))


def exec_loss(z: Sequence, e: float) -> Tensor:
    terms = [(ad._as_tensor(zl) - e) ** 2 for zl in z]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def actual_flops(stats: BatchGateStats, table: FlopsTable) -> Tensor:
    """Batch-averaged cost: ungated layers plus sum_l sum_i (b_i / B) * f_{l,i}."""
    f = Tensor(np.asarray(float(table.ungated), dtype=np.float32))
    for counts, bf in zip(stats.counts, table.blocks):
        costs = np.asarray(bf.sub_blocks, dtype=counts.dtype) / stats.batch_size
        f = f + (counts * Tensor(costs)).sum()
    return f


def flops_loss(f, f_total: float, r: float) -> Tensor:
    return (ad._as_tensor(f) * (1.0 / f_total) - r) ** 2


def category_loss(log_probs: Sequence[Tensor], labels: np.ndarray, alphas: Sequence[float]) -> Tensor:
    """Weighted sum over controllers of the mean negative log-likelihood of the coarse label."""
    if len(log_probs) != len(alphas):
        raise ValueError(f"{len(log_probs)} controllers but {len(alphas)} loss weights")
    out = None
    for lp, a in zip(log_probs, alphas):
        term = ad.nll_loss(lp, labels) * a
        out = term if out is None else out + term
    return out


def total_loss(cls, ctg, exec_, flops, weights: LossWeights = LossWeights()) -> Tensor:
    res = ad._as_tensor(exec_) + ad._as_tensor(flops)
    out = res * weights.res + ad._as_tensor(cls) * weights.cls
    if ctg is not None:
        out = out + ad._as_tensor(ctg) * weights.ctg
    return out
