"""Static network topology: block subdivision, parameter counts and FLOPs tables.

FLOPs are multiply-accumulate counts of conv and linear layers. Pooling,
normalisation and activations cost nothing under this convention.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

RESNET = "resnet-bottleneck"
MBV2 = "mbv2-inverted-residual"
HIDDEN_DIM = 32


def round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def conv_out(n: int, k: int, stride: int) -> int:
    pad = k // 2
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class SubBlockSpec:
    c1: int  # resnet: first 1x1 width; mbv2: hidden width
    c2: int  # resnet: 3x3 width; mbv2: hidden width again
    always_on: bool = False


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    c_in: int
    c_out: int
    stride: int = 1
    n: int = 1
    stage_index: int = 1
    c1: int = 0
    c2: int = 0
    expansion: float = 0.0

    def __post_init__(self):
        if self.kind not in (RESNET, MBV2):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.n < 1:
            raise ValueError(f"N must be >= 1, got {self.n}")
        widths = [self.c_in, self.c_out] + ([self.c1, self.c2] if self.kind == RESNET else [])
        if min(widths) < 1:
            raise ValueError(f"channel counts must be >= 1: {widths}")
        if self.kind == MBV2 and self.expansion <= 0:
            raise ValueError("mbv2 block needs a positive expansion ratio")

    @property
    def has_identity(self) -> bool:
        return self.stride == 1 and self.c_in == self.c_out


@dataclass(frozen=True)
class StemSpec:
    c_out: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    num_categories: int
    input_size: int
    in_channels: int = 3
    hidden_dim: int = HIDDEN_DIM
    gated: bool = True

    @property
    def num_stages(self) -> int:
        return max(b.stage_index for b in self.blocks)

    def subblocks(self, index: int) -> list[SubBlockSpec]:
        return split_block(self.blocks[index])

    def gated_count(self, index: int) -> int:
        if not self.gated:
            return 0
        return sum(not s.always_on for s in self.subblocks(index))


def _check_width(value: int, what: str, spec: BlockSpec) -> int:
    if value < 1:
        raise ValueError(f"{what} width {value} < 1 for block {spec}; use a smaller N")
    return value


def split_resnet_block(spec: BlockSpec) -> list[SubBlockSpec]:
    """Split a bottleneck into N sub-blocks with (approximately) the original parameter count.

    The 3x3 width is divided by N; the first 1x1 width is then solved so that
    the summed conv parameters of the N sub-blocks match the original block.
    """
    if spec.kind != RESNET:
        raise ValueError(f"split_resnet_block needs a {RESNET} block, got {spec.kind}")
    n = spec.n
    c2h = _check_width(round_half_up(Fraction(spec.c2, n)), "3x3", spec)
    orig = resnet_conv_params(spec.c_in, spec.c1, spec.c2, spec.c_out)
    c1h = _check_width(
        round_half_up((Fraction(orig, n) - c2h * spec.c_out) / (spec.c_in + 9 * c2h)), "1x1", spec)
    return [SubBlockSpec(c1h, c2h, always_on=(i == 0 and not spec.has_identity)) for i in range(n)]


def split_mbv2_block(spec: BlockSpec) -> list[SubBlockSpec]:
    """Split an inverted residual into N sub-blocks of expansion ratio E/N each."""
    if spec.kind != MBV2:
        raise ValueError(f"split_mbv2_block needs a {MBV2} block, got {spec.kind}")
    hidden = _check_width(round_half_up(Fraction(spec.c_in) * Fraction(spec.expansion) / spec.n),
                          "hidden", spec)
    return [SubBlockSpec(hidden, hidden, always_on=(i == 0 and not spec.has_identity))
            for i in range(spec.n)]


def split_block(spec: BlockSpec) -> list[SubBlockSpec]:
    return split_resnet_block(spec) if spec.kind == RESNET else split_mbv2_block(spec)


def resnet_conv_params(c_in: int, c1: int, c2: int, c_out: int) -> int:
    return c_in * c1 + 9 * c1 * c2 + c2 * c_out


def mbv2_conv_params(c_in: int, hidden: int, c_out: int) -> int:
    return c_in * hidden + 9 * hidden + hidden * c_out


def original_conv_params(spec: BlockSpec) -> int:
    """Conv weights of the undivided block (shortcut excluded)."""
    if spec.kind == RESNET:
        return resnet_conv_params(spec.c_in, spec.c1, spec.c2, spec.c_out)
    hidden = round_half_up(Fraction(spec.c_in) * Fraction(spec.expansion))
    return mbv2_conv_params(spec.c_in, hidden, spec.c_out)


def split_conv_params(spec: BlockSpec) -> int:
    """Conv weights summed over all sub-blocks (shortcut excluded)."""
    total = 0
    for s in split_block(spec):
        if spec.kind == RESNET:
            total += resnet_conv_params(spec.c_in, s.c1, s.c2, spec.c_out)
        else:
            total += mbv2_conv_params(spec.c_in, s.c1, spec.c_out)
    return total


def parity_gap(spec: BlockSpec) -> float:
    orig = original_conv_params(spec)
    return abs(split_conv_params(spec) - orig) / orig


def _subblock_params(spec: BlockSpec, s: SubBlockSpec) -> int:
    # conv weights plus BN scale/shift after every conv
    if spec.kind == RESNET:
        return resnet_conv_params(spec.c_in, s.c1, s.c2, spec.c_out) + 2 * (s.c1 + s.c2 + spec.c_out)
    return mbv2_conv_params(spec.c_in, s.c1, spec.c_out) + 2 * (2 * s.c1 + spec.c_out)


def _shortcut_params(spec: BlockSpec) -> int:
    if spec.has_identity or spec.kind == MBV2:
        return 0
    return spec.c_in * spec.c_out + 2 * spec.c_out


def _controller_params(net: NetworkSpec, index: int) -> int:
    d = net.hidden_dim
    n_gated = net.gated_count(index)
    p = d * net.blocks[index].c_in + d
    if index > 0:
        p += d * d + d
    if n_gated:
        p += 2 * n_gated * d + 2 * n_gated
    return p


@dataclass(frozen=True)
class ParamCount:
    stem: int
    blocks: tuple[int, ...]
    controllers: tuple[int, ...]
    category_heads: tuple[int, ...]
    head: int

    @property
    def backbone(self) -> int:
        return self.stem + sum(self.blocks) + self.head

    @property
    def total(self) -> int:
        """Deployed parameters: backbone plus gate controllers (category heads are training-only)."""
        return self.backbone + sum(self.controllers)


def count_params(net: NetworkSpec) -> ParamCount:
    stem = net.in_channels * net.stem.c_out * net.stem.kernel ** 2 + 2 * net.stem.c_out
    blocks, ctrls, cats = [], [], []
    for i, b in enumerate(net.blocks):
        blocks.append(sum(_subblock_params(b, s) for s in split_block(b)) + _shortcut_params(b))
        if net.gated:
            ctrls.append(_controller_params(net, i))
            cats.append(net.hidden_dim * net.num_categories + net.num_categories)
    head = net.blocks[-1].c_out * net.num_classes + net.num_classes
    return ParamCount(stem, tuple(blocks), tuple(ctrls), tuple(cats), head)


@dataclass(frozen=True)
class BlockFlops:
    sub_blocks: tuple[int, ...]
    always_on: tuple[bool, ...]
    shortcut: int
    controller: int
    spatial_in: int
    spatial_out: int


@dataclass(frozen=True)
class FlopsTable:
    stem: int
    blocks: tuple[BlockFlops, ...]
    head: int

    @property
    def controller_total(self) -> int:
        return sum(b.controller for b in self.blocks)

    @property
    def body(self) -> int:
        """Residual stages only: every sub-block plus projection shortcuts."""
        return sum(sum(b.sub_blocks) + b.shortcut for b in self.blocks)

    @property
    def ungated(self) -> int:
        """Cost that never depends on gate decisions (always-on sub-blocks excluded)."""
        return self.stem + self.head + sum(b.shortcut + b.controller for b in self.blocks)

    @property
    def f_total(self) -> int:
        return self.ungated + sum(sum(b.sub_blocks) for b in self.blocks)

    @property
    def base_total(self) -> int:
        return self.f_total - self.controller_total

    def sample_flops(self, decisions) -> list[float]:
        """Per-sample cost from per-block [B, N] 0/1 execution arrays."""
        import numpy as np

        total = np.full(np.asarray(decisions[0]).shape[0], float(self.ungated))
        for b, s in zip(self.blocks, decisions):
            total += np.asarray(s, dtype=np.float64) @ np.asarray(b.sub_blocks, dtype=np.float64)
        return total


def build_flops_table(net: NetworkSpec, input_resolution: int | None = None) -> FlopsTable:
    h = input_resolution or net.input_size
    h = conv_out(h, net.stem.kernel, net.stem.stride)
    stem = net.in_channels * net.stem.c_out * net.stem.kernel ** 2 * h * h
    if net.stem.pool:
        h = conv_out(h, 3, 2)
    blocks = []
    d = net.hidden_dim
    for i, b in enumerate(net.blocks):
        ho = conv_out(h, 3, b.stride)
        subs = []
        for s in split_block(b):
            if b.kind == RESNET:
                macs = b.c_in * s.c1 * h * h + 9 * s.c1 * s.c2 * ho * ho + s.c2 * b.c_out * ho * ho
            else:
                macs = b.c_in * s.c1 * h * h + 9 * s.c1 * ho * ho + s.c1 * b.c_out * ho * ho
            subs.append(macs)
        shortcut = 0 if (b.has_identity or b.kind == MBV2) else b.c_in * b.c_out * ho * ho
        ctrl = 0
        if net.gated:
            ctrl = d * b.c_in + (d * d if i > 0 else 0) + 2 * net.gated_count(i) * d
        always = tuple(s.always_on or not net.gated for s in split_block(b))
        blocks.append(BlockFlops(tuple(subs), always, shortcut, ctrl, h, ho))
        h = ho
    head = net.blocks[-1].c_out * net.num_classes
    return FlopsTable(stem, tuple(blocks), head)


def _resnet_stages(layers, planes=(64, 128, 256, 512), stem_c=64, n=2, expansion=4):
    blocks = []
    c_in = stem_c
    for stage, (p, count) in enumerate(zip(planes, layers), start=1):
        for j in range(count):
            stride = 2 if (j == 0 and stage > 1) else 1
            blocks.append(BlockSpec(RESNET, c_in, p * expansion, stride, n, stage, c1=p, c2=p))
            c_in = p * expansion
    return tuple(blocks)


PRESETS = ("dmnn50-imagenet", "dmnn101-imagenet", "dmnn50-cifar", "dmnn20-cifar", "dmnn8-synthetic")


def make_preset(name: str, n: int = 2, r: float | None = None, gated: bool = True) -> NetworkSpec:
    """Build a named network. ``r`` is accepted for symmetry with the CLI and not stored."""
    if name == "dmnn50-imagenet":
        return NetworkSpec(name, StemSpec(64, 7, 2, pool=True), _resnet_stages((3, 4, 6, 3), n=n),
                           1000, 58, 224, gated=gated)
    if name == "dmnn101-imagenet":
        return NetworkSpec(name, StemSpec(64, 7, 2, pool=True), _resnet_stages((3, 4, 23, 3), n=n),
                           1000, 58, 224, gated=gated)
    if name == "dmnn50-cifar":
        return NetworkSpec(name, StemSpec(64, 3, 1, pool=True), _resnet_stages((3, 4, 6, 3), n=n),
                           100, 20, 32, gated=gated)
    if name == "dmnn20-cifar":
        return NetworkSpec(name, StemSpec(16, 3, 1), _resnet_stages((2, 2, 2), (16, 32, 64), 16, n=n),
                           100, 20, 32, gated=gated)
    if name == "dmnn8-synthetic":
        blocks = tuple(BlockSpec(RESNET, 32, 32, 1, n, stage, c1=16, c2=16) for stage in (1, 2, 3))
        return NetworkSpec(name, StemSpec(32, 3, 2), blocks, 10, 10, 16, gated=gated)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def ungated_baseline(net: NetworkSpec) -> NetworkSpec:
    blocks = tuple(dataclasses.replace(b, n=1) for b in net.blocks)
    return dataclasses.replace(net, blocks=blocks, gated=False)


def spec_to_dict(net: NetworkSpec) -> dict:
    return dataclasses.asdict(net)


def spec_from_dict(d: dict) -> NetworkSpec:
    d = dict(d)
    d["stem"] = StemSpec(**d["stem"])
    d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
    return NetworkSpec(**d)


def save_spec(net: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(net), indent=2) + "\n")


def load_spec(path) -> NetworkSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))
