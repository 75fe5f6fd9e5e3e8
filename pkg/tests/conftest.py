"""Shared fixtures: one full benchmark pipeline per test session.

The trained model, synthesized controller and the three closed-loop runs
feed both the acceptance criteria and the CLI checks.  Everything is
seeded, so the artifacts are reproducible.
"""

import os
import time
from dataclasses import dataclass, field

import pytest
from click.testing import CliRunner

from narxmpc.cli import main

BENCH_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "benchmark.ini")
SMOKE_CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "smoke.ini")


@dataclass
class Pipeline:
    config: str
    root: str
    data: str = ""
    model: str = ""
    controller: str = ""
    runs: dict = field(default_factory=dict)
    train_seconds: float = 0.0
    exit_codes: dict = field(default_factory=dict)


def _invoke(args):
    result = CliRunner().invoke(main, args, catch_exceptions=False)
    return result


def run_pipeline(config, root, modes=("nominal",)):
    pipe = Pipeline(config=config, root=str(root))
    pipe.data = os.path.join(pipe.root, "data")
    res = _invoke(["generate-data", "--config", config, "--out", pipe.data])
    assert res.exit_code == 0, res.output
    model_dir = os.path.join(pipe.root, "model")
    tic = time.perf_counter()
    res = _invoke(["train", "--config", config, "--data", pipe.data,
                   "--out", model_dir, "--no-plot"])
    pipe.train_seconds = time.perf_counter() - tic
    assert res.exit_code == 0, res.output
    pipe.model = os.path.join(model_dir, "model.txt")
    ctrl_dir = os.path.join(pipe.root, "ctrl")
    res = _invoke(["synthesize", "--config", config, "--model", pipe.model,
                   "--out", ctrl_dir])
    assert res.exit_code == 0, res.output
    pipe.controller = os.path.join(ctrl_dir, "controller.txt")
    for mode in modes:
        out = os.path.join(pipe.root, f"run_{mode}")
        res = _invoke(["run", "--config", config, "--model", pipe.model,
                       "--controller", pipe.controller, "--mode", mode,
                       "--out", out, "--no-plot"])
        assert res.exit_code in (0, 2), res.output
        pipe.exit_codes[mode] = res.exit_code
        pipe.runs[mode] = os.path.join(out, f"closed_loop_{mode}.csv")
    return pipe


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Full benchmark pipeline; several minutes of compute."""
    root = tmp_path_factory.mktemp("bench")
    return run_pipeline(os.path.abspath(BENCH_CONFIG), root,
                        modes=("nominal", "tube", "deb"))


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    """Minute-scale pipeline for CLI and determinism checks."""
    root = tmp_path_factory.mktemp("smoke")
    return run_pipeline(os.path.abspath(SMOKE_CONFIG), root, modes=("nominal",))
