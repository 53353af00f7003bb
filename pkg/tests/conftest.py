"""Shared fixtures: cached synthetic training runs and the acceptance report."""

import os

import pytest

from dmnn.data import synth_dataset
from dmnn.train import TrainConfig, evaluate, train

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    os.environ.setdefault("DMNN_THREADS", "1")


@pytest.fixture
def report():
    """Record one acceptance line (ok=None marks a skip); printed in the terminal summary."""

    def _report(number, name: str, ok, detail: str = "") -> bool:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {name}" + (f" ({detail})" if detail else ""))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class SyntheticRun:
    """A finished dmnn8-synthetic run plus its evaluation on the training split."""

    def __init__(self, r: float, steps: int, out_dir):
        self.r = r
        self.config = TrainConfig.synthetic(target_rate=r, max_steps=steps, out_dir=str(out_dir))
        self.result = train(self.config)
        self.out_dir = out_dir
        self.train_eval = evaluate(self.result.network, synth_dataset(self.config.seed))

    @property
    def final_epoch(self):
        return self.result.history[-1]


_RUNS: dict = {}


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    def get(r: float, steps: int) -> SyntheticRun:
        key = (r, steps)
        if key not in _RUNS:
            _RUNS[key] = SyntheticRun(r, steps, tmp_path_factory.mktemp(f"synth_r{r}_s{steps}"))
        return _RUNS[key]

    return get
