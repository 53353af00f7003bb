"""Command-line entry point: ``dmnn {train,eval,flops,export-rates,export-flops-hist}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset, load_cifar100, synth_dataset
from .network import DmnnNetwork, load_checkpoint
from .topology import PRESETS, build_flops_table, count_params, make_preset, ungated_baseline
from .train import TrainConfig, config_to_dict, evaluate, threads, train

EXPORT_KEYS = ("export_rates", "export_flops_hist")
QUANTILES = (0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0)


class ConfigError(ValueError):
    pass


def parse_config(raw: dict) -> tuple[TrainConfig, dict]:
    """Strictly parse an experiment config: TrainConfig fields plus export toggles."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in raw:
        if key not in known and key not in EXPORT_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    exports = {k: bool(raw.get(k, False)) for k in EXPORT_KEYS}
    fields = {k: v for k, v in raw.items() if k in known}
    try:
        return TrainConfig(**fields), exports
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> tuple[TrainConfig, dict]:
    return parse_config(json.loads(Path(path).read_text()))


def _dataset_for(net: DmnnNetwork, data_dir: str | None, split: str) -> Dataset:
    if data_dir:
        train_ds, test_ds = load_cifar100(data_dir)
        return train_ds if split == "train" else test_ds
    desc = getattr(net, "meta", {}).get("dataset")
    if not desc:
        raise ConfigError("no --data given and the checkpoint does not record its dataset")
    if desc["dataset"] == "synthetic":
        if split == "train":
            return synth_dataset(desc["seed"], n_per_class=desc["synthetic_per_class"], split="train")
        return synth_dataset(desc["seed"] + 10_000, n_per_class=max(desc["synthetic_per_class"] // 4, 10),
                             split="test")
    train_ds, test_ds = load_cifar100(desc["data_dir"])
    return train_ds if split == "train" else test_ds


def write_rates_csv(result, num_subblocks: list[int], path) -> None:
    cats = sorted(result.category_rates)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["block", "sub_block"] + [f"coarse_{c}" for c in cats])
        for l, n in enumerate(num_subblocks):
            for i in range(n):
                w.writerow([l, i] + [repr(float(result.category_rates[c][l][i])) for c in cats])


def write_flops_hist_csv(result, path) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "coarse_label", "fine_label", "actual_flops"])
        for i, (c, fl, fv) in enumerate(zip(result.coarse_labels, result.fine_labels, result.per_sample_flops)):
            w.writerow([i, int(c), int(fl), repr(float(fv))])
    summary = Path(path).with_name(Path(path).stem + "_quantiles.csv")
    with open(summary, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["quantile", "actual_flops"])
        for q in QUANTILES:
            w.writerow([repr(q), repr(float(np.quantile(result.per_sample_flops, q)))])
    return summary


def cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"seed": args.seed, "out_dir": args.out, "preset": args.preset,
                 "n_subblocks": args.n_subblocks, "target_rate": args.target_rate, "data_dir": args.data}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    config, exports = parse_config(raw)
    if not config.out_dir:
        raise ConfigError("train needs an output directory (--out or out_dir)")
    result = train(config)
    out = Path(config.out_dir)
    resolved = {**config_to_dict(config), **exports}
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    if any(exports.values()):
        net = load_checkpoint(out / "checkpoint.dmnn")
        ds = _dataset_for(net, None, "test")
        with threadpool_limits(limits=threads()):
            res = evaluate(net, ds)
        if exports["export_rates"]:
            write_rates_csv(res, [len(b.subs) for b in net.blocks], out / "rates.csv")
        if exports["export_flops_hist"]:
            write_flops_hist_csv(res, out / "flops_hist.csv")
    last = result.history[-1]
    print(f"trained {result.steps} steps; top1_err {last.top1_err:.4f} flops_ratio {last.flops_ratio:.4f}")
    return 0


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = _dataset_for(net, args.data, args.split)
    with threadpool_limits(limits=threads()):
        res = evaluate(net, ds)
    params = count_params(net.spec)
    print(f"top1_err\t{res.top1_err:.6f}")
    print(f"params\t{params.total}")
    print(f"mean_flops\t{res.mean_flops:.6g}")
    print(f"flops_ratio\t{res.flops_ratio:.6f}")
    return 0


def cmd_flops(args) -> int:
    spec = make_preset(args.preset, args.n_subblocks or 2)
    table = build_flops_table(spec)
    params = count_params(spec)
    print(f"# {spec.name} N={args.n_subblocks or 2} input={spec.input_size}")
    print("block\tstage\tstride\tc_in\tc_out\tsub_block_flops\tshortcut\tcontroller\tparams")
    for l, (b, bf) in enumerate(zip(spec.blocks, table.blocks)):
        subs = ",".join(str(f) + ("*" if on else "") for f, on in zip(bf.sub_blocks, bf.always_on))
        ctrl_p = params.controllers[l] if params.controllers else 0
        print(f"{l}\t{b.stage_index}\t{b.stride}\t{b.c_in}\t{b.c_out}\t{subs}\t{bf.shortcut}\t{bf.controller}\t"
              f"{params.blocks[l] + ctrl_p}")
    print(f"stem\t{table.stem}\nhead\t{table.head}")
    print(f"controller_flops\t{table.controller_total}")
    print(f"controller_overhead_ratio\t{table.controller_total / table.base_total:.6e}")
    print(f"f_total\t{table.f_total}")
    print(f"body_flops\t{table.body}")
    print(f"params_total\t{params.total}")
    if args.baseline:
        base = ungated_baseline(spec)
        bt, bp = build_flops_table(base), count_params(base)
        print(f"baseline_f_total\t{bt.f_total}\t(diff {table.f_total - bt.f_total:+d})")
        print(f"baseline_params\t{bp.total}\t(diff {params.total - bp.total:+d})")
    return 0


def cmd_export_rates(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = _dataset_for(net, args.data, args.split)
    with threadpool_limits(limits=threads()):
        res = evaluate(net, ds)
    write_rates_csv(res, [len(b.subs) for b in net.blocks], args.out)
    return 0


def cmd_export_flops_hist(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = _dataset_for(net, args.data, args.split)
    with threadpool_limits(limits=threads()):
        res = evaluate(net, ds)
    summary = write_flops_hist_csv(res, args.out)
    print(Path(summary).read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmnn", description="Dynamic multi-path network experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (train) or CSV path (exports)")
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="CIFAR-100 binary directory")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--n-subblocks", type=int)
        p.add_argument("--target-rate", type=float)
        p.add_argument("--split", choices=("train", "test"), default="test")
        return p

    common(sub.add_parser("train")).set_defaults(func=cmd_train)
    common(sub.add_parser("eval")).set_defaults(func=cmd_eval)
    p = common(sub.add_parser("flops"))
    p.add_argument("--baseline", action="store_true", help="also print the ungated baseline and the difference")
    p.set_defaults(func=cmd_flops)
    common(sub.add_parser("export-rates")).set_defaults(func=cmd_export_rates)
    common(sub.add_parser("export-flops-hist")).set_defaults(func=cmd_export_flops_hist)
    return parser


REQUIRED = {"eval": ("checkpoint",), "flops": ("preset",), "export-rates": ("checkpoint", "out"),
            "export-flops-hist": ("checkpoint", "out")}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in REQUIRED.get(args.command, ()):
        if getattr(args, name) is None:
            parser.error(f"{args.command} needs --{name.replace('_', '-')}")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
