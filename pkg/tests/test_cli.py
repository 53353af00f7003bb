import csv
import json

import numpy as np
import pytest

from dmnn.cli import ConfigError, main, parse_config, write_rates_csv
from dmnn.data import synth_dataset
from dmnn.network import DmnnNetwork, force_gates
from dmnn.topology import make_preset
from dmnn.train import evaluate

SMALL = {"preset": "dmnn8-synthetic", "dataset": "synthetic", "batch_size": 32, "max_steps": 12,
         "synthetic_per_class": 16, "augment": False, "lr_schedule": "cosine", "lr": 0.05, "target_rate": 0.5}


def read_csv(path):
    raw = open(path, "rb").read()
    assert b"\r" not in raw
    return list(csv.reader(raw.decode().splitlines()))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = out / "exp.json"
    cfg.write_text(json.dumps({**SMALL, "export_rates": True, "export_flops_hist": True}))
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    return out


def test_unknown_config_key_is_named():
    with pytest.raises(ConfigError, match="'learning_rate'"):
        parse_config({"learning_rate": 0.1})


def test_unknown_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({**SMALL, "epochz": 3}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "epochz" in capsys.readouterr().err


def test_train_outputs(run_dir):
    rows = read_csv(run_dir / "metrics.csv")
    assert rows[0] == ["epoch", "lr", "loss_total", "loss_cls", "loss_ctg", "loss_exec", "loss_flops", "top1_err",
                       "flops_ratio", "mean_exec_rate", "seconds"]
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["seed"] == 3 and resolved["export_rates"] is True
    assert (run_dir / "checkpoint.dmnn").exists()


def test_rates_csv_schema(run_dir):
    rows = read_csv(run_dir / "rates.csv")
    assert rows[0] == ["block", "sub_block"] + [f"coarse_{k}" for k in range(10)]
    assert len(rows) - 1 == 3 * 2
    cells = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    assert ((cells >= 0) & (cells <= 1)).all()


def test_forced_all_on_rates_are_one(tmp_path):
    net = DmnnNetwork(make_preset("dmnn8-synthetic"), seed=0)
    force_gates(net, 1)
    res = evaluate(net, synth_dataset(0, n_per_class=4))
    write_rates_csv(res, [len(b.subs) for b in net.blocks], tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert all(float(v) == 1.0 for r in rows[1:] for v in r[2:])


def test_eval_mean_flops_matches_histogram(run_dir, tmp_path, capsys):
    ckpt = str(run_dir / "checkpoint.dmnn")
    assert main(["eval", "--checkpoint", ckpt]) == 0
    printed = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert set(printed) == {"top1_err", "params", "mean_flops", "flops_ratio"}
    hist = tmp_path / "hist.csv"
    assert main(["export-flops-hist", "--checkpoint", ckpt, "--out", str(hist)]) == 0
    rows = read_csv(hist)
    assert rows[0] == ["sample_id", "coarse_label", "fine_label", "actual_flops"]
    per_sample = np.array([float(r[3]) for r in rows[1:]])
    assert float(printed["mean_flops"]) == pytest.approx(per_sample.mean(), rel=1e-6)
    q = read_csv(tmp_path / "hist_quantiles.csv")
    assert q[0] == ["quantile", "actual_flops"] and float(q[4][1]) == pytest.approx(np.median(per_sample))


def test_exports_are_idempotent(run_dir, tmp_path):
    ckpt = str(run_dir / "checkpoint.dmnn")
    for name in ("a.csv", "b.csv"):
        assert main(["export-rates", "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (run_dir / "rates.csv").read_bytes()


def test_flops_command(capsys):
    assert main(["flops", "--preset", "dmnn50-imagenet", "--n-subblocks", "2", "--target-rate", "0.3",
                 "--baseline"]) == 0
    out = dict(l.split("\t")[:2] for l in capsys.readouterr().out.splitlines() if not l.startswith("#"))
    assert float(out["controller_overhead_ratio"]) <= 4e-4
    assert int(out["baseline_params"]) == 25_557_032


def test_eval_requires_checkpoint():
    with pytest.raises(SystemExit):
        main(["eval"])


@pytest.mark.slow
def test_trained_export_rates_vary_by_category(synthetic_run, tmp_path):
    run = synthetic_run(0.5, 2000)
    out = tmp_path / "rates.csv"
    assert main(["export-rates", "--checkpoint", str(run.out_dir / "checkpoint.dmnn"), "--out", str(out)]) == 0
    rows = read_csv(out)
    cells = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    col_means = cells.mean(axis=0)
    assert ((col_means >= 0.3) & (col_means <= 0.9)).all(), col_means
    assert np.ptp(col_means) > 0, "every category has the same mean execution rate"
