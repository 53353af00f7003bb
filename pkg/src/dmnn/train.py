"""Optimiser, learning-rate schedules, training loop and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .data import (Dataset, augment_batch, channel_stats, iterate_batches, load_cifar100,
                   synth_dataset)
from .network import DmnnNetwork, save_checkpoint
from .objectives import (BatchGateStats, LossWeights, ResourceConfig, actual_flops, category_loss,
                         exec_loss, execution_rate, flops_loss, stage_weights, total_loss)
from .topology import make_preset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lr", "loss_total", "loss_cls", "loss_ctg", "loss_exec", "loss_flops",
                  "top1_err", "flops_ratio", "mean_exec_rate", "seconds"]


@dataclass
class TrainConfig:
    preset: str = "dmnn50-cifar"
    n_subblocks: int = 2
    target_rate: float = 0.7
    batch_size: int = 256
    epochs: int = 200
    max_steps: int | None = None
    lr_schedule: str = "step"
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = (100, 150)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    category_supervision: bool = True
    gated: bool = True
    augment: bool = True
    dataset: str = "cifar100"
    data_dir: str | None = None
    synthetic_per_class: int = 100
    eval_every: int = 1
    out_dir: str | None = None
    alpha_ctg: float = 1.0
    alpha_res: float = 1.0
    alpha_cls: float = 1.0

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.lr_schedule not in ("step", "cosine"):
            raise ValueError(f"lr_schedule must be 'step' or 'cosine', got {self.lr_schedule!r}")
        if self.dataset not in ("cifar100", "synthetic"):
            raise ValueError(f"dataset must be 'cifar100' or 'synthetic', got {self.dataset!r}")
        ResourceConfig(self.target_rate)

    @classmethod
    def synthetic(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults for the synthetic toy network."""
        base = dict(preset="dmnn8-synthetic", dataset="synthetic", batch_size=64, epochs=100,
                    lr_schedule="cosine", lr=0.05, augment=False, weight_decay=1e-4,
                    target_rate=0.5, synthetic_per_class=100)
        base.update(overrides)
        return cls(**base)


@dataclass
class Metrics:
    epoch: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_ctg: float
    loss_exec: float
    loss_flops: float
    top1_err: float
    flops_ratio: float
    mean_exec_rate: float
    seconds: float
    exec_rates: list[float] = field(default_factory=list)
    train_top1_err: float = float("nan")

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class TrainResult:
    history: list[Metrics]
    network: DmnnNetwork
    step_losses: list[float]
    step_exec_rates: list[float]
    step_flops_ratios: list[float]
    steps: int


def lr_at(config: TrainConfig, epoch: int, total_epochs: int | None = None) -> float:
    total = total_epochs or config.epochs
    if config.lr_schedule == "step":
        return config.lr * 0.1 ** sum(epoch >= m for m in config.lr_milestones)
    return 0.5 * config.lr * (1 + math.cos(math.pi * epoch / total))


def sgd_step(params, state: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
             nesterov: bool = True) -> None:
    """In-place SGD with (Nesterov) momentum; decay only for parameters flagged ``decay``."""
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and getattr(p, "decay", False):
            g = g + weight_decay * p.data
        if momentum:
            v = state.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            state[id(p)] = v
            g = g + momentum * v if nesterov else v
        p.data = (p.data - lr * g).astype(p.data.dtype)


def threads() -> int:
    return int(os.environ.get("DMNN_THREADS", "1"))


def load_data(config: TrainConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "synthetic":
        return (synth_dataset(config.seed, n_per_class=config.synthetic_per_class, split="train"),
                synth_dataset(config.seed + 10_000, n_per_class=max(config.synthetic_per_class // 4, 10),
                              split="test"))
    if not config.data_dir:
        raise ValueError("dataset 'cifar100' needs data_dir")
    return load_cifar100(config.data_dir)


def dataset_descriptor(config: TrainConfig) -> dict:
    return {"dataset": config.dataset, "seed": config.seed,
            "synthetic_per_class": config.synthetic_per_class, "data_dir": config.data_dir}


@dataclass
class StepLosses:
    total: ad.Tensor
    cls: float
    ctg: float
    exec_: float
    flops: float
    exec_rate: float
    flops_ratio: float
    correct: int


def compute_losses(net: DmnnNetwork, rec, fine, coarse, config: TrainConfig, alphas) -> StepLosses:
    cls = ad.cross_entropy(rec.logits, fine)
    stats = BatchGateStats.from_gates(rec.gates)
    z = [execution_rate(c, stats.batch_size) for c in stats.counts]
    table = net.flops_table
    le = exec_loss(z, config.target_rate)
    f = actual_flops(stats, table)
    lf = flops_loss(f, table.f_total, config.target_rate)
    ctg = None
    if config.category_supervision and rec.category_log_probs:
        ctg = category_loss(rec.category_log_probs, coarse, alphas)
    weights = LossWeights(config.alpha_ctg, config.alpha_res, config.alpha_cls)
    total = total_loss(cls, ctg, le, lf, weights)
    executed = np.concatenate([g.reshape(-1) for g in rec.executed])
    return StepLosses(total, cls.item(), ctg.item() if ctg is not None else 0.0, le.item(), lf.item(),
                      float(executed.mean()), f.item() / table.f_total,
                      int((rec.logits.data.argmax(axis=1) == fine).sum()))


def train(config: TrainConfig, network: DmnnNetwork | None = None) -> TrainResult:
    with threadpool_limits(limits=threads()):
        return _train(config, network)


def _train(config: TrainConfig, network: DmnnNetwork | None) -> TrainResult:
    train_ds, test_ds = load_data(config)
    spec = make_preset(config.preset, config.n_subblocks, config.target_rate, gated=config.gated)
    net = network or DmnnNetwork(spec, seed=config.seed)
    net.norm_mean[:], net.norm_std[:] = channel_stats(train_ds)
    alphas = stage_weights(net.spec)
    aug_rng = np.random.default_rng([config.seed, 2])
    state: dict = {}
    params = net.parameters()
    steps_per_epoch = len(train_ds) // config.batch_size
    epochs = config.epochs
    if config.max_steps is not None:
        epochs = math.ceil(config.max_steps / steps_per_epoch)
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[Metrics] = []
    step_losses, step_exec, step_flops = [], [], []
    best_err = math.inf
    step = 0
    for epoch in range(epochs):
        lr = lr_at(config, epoch, epochs)
        t0 = time.perf_counter()
        sums = np.zeros(7)
        n_batches = 0
        correct = seen = 0
        block_rates = np.zeros(len(net.blocks))
        for images, fine, coarse in iterate_batches(train_ds, config.batch_size, config.seed, epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            if config.augment:
                images = augment_batch(images, aug_rng)
            rec = net.forward(net.preprocess(images), "train", with_category=config.category_supervision)
            sl = compute_losses(net, rec, fine, coarse, config, alphas)
            net.zero_grad()
            ad.backward(sl.total)
            sgd_step(params, state, lr, config.momentum, config.weight_decay)
            loss_value = sl.total.item()
            step_losses.append(loss_value)
            step_exec.append(sl.exec_rate)
            step_flops.append(sl.flops_ratio)
            sums += [loss_value, sl.cls, sl.ctg, sl.exec_, sl.flops, sl.exec_rate, sl.flops_ratio]
            block_rates += [g.mean() for g in rec.executed]
            correct += sl.correct
            seen += len(fine)
            n_batches += 1
            step += 1
        if n_batches == 0:
            break
        means = sums / n_batches
        top1 = float("nan")
        last = epoch == epochs - 1 or (config.max_steps is not None and step >= config.max_steps)
        if (epoch + 1) % config.eval_every == 0 or last:
            top1 = evaluate(net, test_ds).top1_err
        m = Metrics(epoch, lr, *means[:5], top1, means[6], means[5], time.perf_counter() - t0,
                    list(block_rates / n_batches), 1.0 - correct / seen)
        history.append(m)
        log.info("epoch %d lr %.4g loss %.4f err %.4f flops %.3f exec %.3f", epoch, lr, m.loss_total,
                 top1, m.flops_ratio, m.mean_exec_rate)
        if out_dir:
            write_metrics(history, out_dir / "metrics.csv")
            if not math.isnan(top1) and top1 < best_err:
                best_err = top1
                save_checkpoint(net, out_dir / "checkpoint.dmnn",
                                {"dataset": dataset_descriptor(config), "epoch": epoch})
        if config.max_steps is not None and step >= config.max_steps:
            break
    if out_dir:
        (out_dir / "config.json").write_text(json.dumps(config_to_dict(config), indent=2) + "\n")
    return TrainResult(history, net, step_losses, step_exec, step_flops, step)


def config_to_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["lr_milestones"] = list(d["lr_milestones"])
    return d


def write_metrics(history: list[Metrics], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in history:
            w.writerow([_fmt(v) for v in m.row()])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class EvalResult:
    top1_err: float
    mean_flops: float
    flops_ratio: float
    exec_rates: list[np.ndarray]  # per block, [N] mean execution per sub-block
    per_sample_flops: np.ndarray
    category_rates: dict[int, list[np.ndarray]]  # coarse label -> per block [N]
    fine_labels: np.ndarray
    coarse_labels: np.ndarray
    predictions: np.ndarray


def evaluate(network: DmnnNetwork, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Noiseless masked evaluation over the whole split."""
    preds, flops = [], []
    executed: list[list[np.ndarray]] = [[] for _ in network.blocks]
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            rec = network.forward(network.preprocess(images), "eval", with_category=False)
            preds.append(rec.logits.data.argmax(axis=1))
            flops.append(rec.actual_flops)
            for l, g in enumerate(rec.executed):
                executed[l].append(g)
    preds = np.concatenate(preds)
    per_sample = np.concatenate(flops)
    execs = [np.concatenate(e).astype(np.float64) for e in executed]
    coarse = dataset.coarse_labels
    cat_rates = {int(c): [e[coarse == c].mean(axis=0) for e in execs] for c in np.unique(coarse)}
    f_total = network.flops_table.f_total
    return EvalResult(float((preds != dataset.fine_labels).mean()), float(per_sample.mean()),
                      float(per_sample.mean() / f_total), [e.mean(axis=0) for e in execs], per_sample,
                      cat_rates, dataset.fine_labels, coarse, preds)
