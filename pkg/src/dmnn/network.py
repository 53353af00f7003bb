"""Gated multi-path residual network: stem, gated blocks with controllers, classifier.

Training runs every sub-block on the whole batch and multiplies each output
by its per-sample gate (masked execution). Evaluation with a batch of one can
instead skip switched-off sub-blocks entirely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controller import Controller, GateDecisions, decide
from .layers import BatchNorm, Conv2d, DepthwiseConv2d, Linear, Module
from .topology import (MBV2, RESNET, BlockSpec, FlopsTable, NetworkSpec, SubBlockSpec,
                       build_flops_table, spec_from_dict, spec_to_dict)


class ResNetSubBlock(Module):
    def __init__(self, b: BlockSpec, s: SubBlockSpec, rng):
        self.conv1 = Conv2d(b.c_in, s.c1, 1, rng=rng)
        self.bn1 = BatchNorm(s.c1)
        self.conv2 = Conv2d(s.c1, s.c2, 3, b.stride, rng=rng)
        self.bn2 = BatchNorm(s.c2)
        self.conv3 = Conv2d(s.c2, b.c_out, 1, rng=rng)
        self.bn3 = BatchNorm(b.c_out, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.relu(self.bn1(self.conv1(x)))
        y = ad.relu(self.bn2(self.conv2(y)))
        return self.bn3(self.conv3(y))


class InvertedResidualSubBlock(Module):
    def __init__(self, b: BlockSpec, s: SubBlockSpec, rng):
        self.expand = Conv2d(b.c_in, s.c1, 1, rng=rng)
        self.bn1 = BatchNorm(s.c1)
        self.dw = DepthwiseConv2d(s.c1, 3, b.stride, rng=rng)
        self.bn2 = BatchNorm(s.c1)
        self.project = Conv2d(s.c1, b.c_out, 1, rng=rng)
        self.bn3 = BatchNorm(b.c_out, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.relu6(self.bn1(self.expand(x)))
        y = ad.relu6(self.bn2(self.dw(y)))
        return self.bn3(self.project(y))


class Shortcut(Module):
    def __init__(self, b: BlockSpec, rng):
        self.conv = Conv2d(b.c_in, b.c_out, 1, b.stride, rng=rng)
        self.bn = BatchNorm(b.c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class DmnnBlock(Module):
    def __init__(self, b: BlockSpec, subs: list[SubBlockSpec], always_on: tuple[bool, ...], rng):
        self.kind = b.kind
        self.has_identity = b.has_identity
        cls = ResNetSubBlock if b.kind == RESNET else InvertedResidualSubBlock
        self.subs = [cls(b, s, rng) for s in subs]
        self.always_on = always_on
        self.shortcut = Shortcut(b, rng) if (b.kind == RESNET and not b.has_identity) else None

    def __call__(self, x: Tensor, gates: np.ndarray | Tensor | None, skip: bool = False) -> Tensor:
        """``gates`` holds one column per gated sub-block ([B, N_gated])."""
        if self.shortcut is not None:
            out = self.shortcut(x)
        elif self.has_identity:
            out = x
        else:
            out = None
        b = x.shape[0]
        j = 0
        for sub, on in zip(self.subs, self.always_on):
            if on:
                y = sub(x)
            else:
                col = gates[:, j]
                j += 1
                if skip:
                    if (col.data if isinstance(col, Tensor) else col)[0] == 0:
                        continue
                    y = sub(x)
                else:
                    y = sub(x) * ad._as_tensor(col).reshape(b, 1, 1, 1)
            out = y if out is None else out + y
        return ad.relu(out) if self.kind == RESNET else out


@dataclass
class ForwardRecord:
    logits: Tensor
    decisions: list[GateDecisions | None]
    gates: list[Tensor]  # per block [B, N]: 1 for executed sub-blocks, straight-through grads
    category_log_probs: list[Tensor] = field(default_factory=list)
    actual_flops: np.ndarray | None = None

    @property
    def executed(self) -> list[np.ndarray]:
        return [g.data for g in self.gates]


class DmnnNetwork(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.flops_table: FlopsTable = build_flops_table(spec)
        self.stem_conv = Conv2d(spec.in_channels, spec.stem.c_out, spec.stem.kernel, spec.stem.stride, rng=rng)
        self.stem_bn = BatchNorm(spec.stem.c_out)
        self.stem_pool = spec.stem.pool
        self.blocks = []
        self.controllers = []
        for i, (b, bf) in enumerate(zip(spec.blocks, self.flops_table.blocks)):
            self.blocks.append(DmnnBlock(b, spec.subblocks(i), bf.always_on, rng))
            if spec.gated:
                self.controllers.append(Controller(b.c_in, spec.gated_count(i), spec.num_categories,
                                                   first=(i == 0), hidden_dim=spec.hidden_dim, rng=rng))
        self.fc = Linear(spec.blocks[-1].c_out, spec.num_classes, rng)
        self.norm_mean = np.zeros(spec.in_channels, dtype=np.float32)
        self.norm_std = np.ones(spec.in_channels, dtype=np.float32)
        self.gate_rng = np.random.default_rng([seed, 1])
        self.forced: list[np.ndarray | None] | None = None

    _buffers = ("norm_mean", "norm_std")

    def preprocess(self, images: np.ndarray) -> Tensor:
        """uint8 [B,C,H,W] -> normalised float32 tensor."""
        x = images.astype(np.float32) / 255.0
        x = (x - self.norm_mean[None, :, None, None]) / self.norm_std[None, :, None, None]
        return Tensor(x.astype(np.float32))

    def forward(self, x, mode: str = "train", skip: bool = False, with_category: bool = True,
                rng: np.random.Generator | None = None) -> ForwardRecord:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        bsz = x.shape[0]
        if skip and (mode != "eval" or bsz != 1):
            raise ValueError("skipping execution needs eval mode and batch size 1; use masked eval for B > 1")
        self.train(mode == "train")
        rng = rng if rng is not None else self.gate_rng

        y = ad.relu(self.stem_bn(self.stem_conv(x)))
        if self.stem_pool:
            y = ad.max_pool2d(y, 3, 2, 1)
        h = None
        decisions, gates, cats = [], [], []
        ones = Tensor(np.ones(bsz, dtype=x.dtype))
        for i, block in enumerate(self.blocks):
            dec = None
            col_gates = None
            if self.spec.gated:
                ctrl = self.controllers[i]
                h = ctrl.hidden(y, h)
                if mode == "train" and with_category:
                    cats.append(ctrl.category_log_probs(h))
                if ctrl.n_gated:
                    dec = decide(ctrl.logits(h), mode, rng)
                    col_gates = dec.s
                    forced = self.forced[i] if self.forced is not None else None
                    if forced is not None:
                        col_gates = Tensor(np.broadcast_to(forced, (bsz, ctrl.n_gated)).astype(x.dtype))
            decisions.append(dec)
            cols, j = [], 0
            for on in block.always_on:
                if on:
                    cols.append(ones)
                else:
                    cols.append(col_gates[:, j])
                    j += 1
            gates.append(ad.stack(cols, axis=1))
            y = block(y, col_gates, skip=skip)
        logits = self.fc(ad.global_avg_pool(y))
        rec = ForwardRecord(logits, decisions, gates, cats)
        rec.actual_flops = self.flops_table.sample_flops(rec.executed)
        return rec

    __call__ = forward


def force_gates(network: DmnnNetwork, pattern) -> None:
    """Override controller decisions.

    ``pattern`` is ``None`` (clear), a scalar 0/1 applied to every gated
    sub-block, or a per-block list of arrays broadcastable to [B, N_gated]
    (``None`` entries leave that block's controller in charge).
    """
    if pattern is None:
        network.forced = None
        return
    if np.isscalar(pattern):
        network.forced = [np.full(c.n_gated, float(pattern)) for c in network.controllers]
        return
    if len(pattern) != len(network.blocks):
        raise ValueError(f"pattern has {len(pattern)} entries, network has {len(network.blocks)} blocks")
    network.forced = [None if p is None else np.asarray(p, dtype=np.float64) for p in pattern]


# checkpoint file: b"DMNN", u16 version, then records until EOF
MAGIC = b"DMNN"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1


class CheckpointError(ValueError):
    pass


def _write_record(f, name: str, arr: np.ndarray, code: int) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    dt = "<f4" if code == DTYPE_F32 else "u1"
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def save_checkpoint(network: DmnnNetwork, path, meta: dict | None = None) -> None:
    info = {"spec": spec_to_dict(network.spec), **(meta or {})}
    blob = np.frombuffer(json.dumps(info, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        _write_record(f, "__meta__", blob, DTYPE_U8)
        for name, p in network.named_parameters():
            _write_record(f, "param:" + name, p.data, DTYPE_F32)
        for name, buf in network.named_buffers():
            _write_record(f, "buffer:" + name, buf, DTYPE_F32)


def read_records(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {VERSION}")
    pos = 6
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        if code == DTYPE_F32:
            dt, size = np.dtype("<f4"), 4
        elif code == DTYPE_U8:
            dt, size = np.dtype("u1"), 1
        else:
            raise CheckpointError(f"{path}: unknown dtype code {code} in record {name!r}")
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(dims).astype(
            np.float32 if code == DTYPE_F32 else np.uint8)
        pos += count * size
    return out


def load_checkpoint(path) -> DmnnNetwork:
    recs = read_records(path)
    meta = json.loads(bytes(recs.pop("__meta__")).decode("utf-8"))
    net = DmnnNetwork(spec_from_dict(meta.pop("spec")))
    params = dict(net.named_parameters())
    expected = {"param:" + k for k in params} | {"buffer:" + k for k, _ in net.named_buffers()}
    if set(recs) != expected:
        missing, extra = expected - set(recs), set(recs) - expected
        raise CheckpointError(f"{path}: record mismatch, missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
    for name, p in params.items():
        p.data = recs["param:" + name].copy()
    owners = {}
    for m_name, m in _named_modules(net):
        for b in getattr(m, "_buffers", ()):
            owners[f"{m_name}{b}"] = (m, b)
    for key, (m, b) in owners.items():
        getattr(m, b)[...] = recs["buffer:" + key]
    net.meta = meta
    return net


def _named_modules(module: Module, prefix: str = ""):
    yield prefix, module
    for name, value in vars(module).items():
        if isinstance(value, Module):
            yield from _named_modules(value, f"{prefix}{name}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{name}.{i}.")
