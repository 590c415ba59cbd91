import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from metricseg import pipeline
from metricseg.config import PipelineConfig
from metricseg.geometry import read_point_cloud
from metricseg.model import save_checkpoint

N_TRAIN = 200
N_HELD_OUT = 20


@dataclass
class TrainedRun:
    cfg: PipelineConfig
    state: object
    logs: list
    root: Path
    train_dir: Path
    test_dir: Path
    pred_dir: Path
    checkpoint: Path
    report: object
    seconds: dict = field(default_factory=dict)

    def held_out(self):
        return [read_point_cloud(f) for f in pipeline.scene_files(self.test_dir)]


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Default configuration trained end to end: gen -> train -> segment -> eval.

    Shared by the acceptance checks and the slow pipeline tests.
    """
    root = tmp_path_factory.mktemp("e2e")
    cfg = PipelineConfig()
    seconds = {}
    t0 = time.perf_counter()
    all_dir = root / "all"
    paths = pipeline.gen_scenes(cfg, N_TRAIN + N_HELD_OUT, all_dir)
    train_dir, test_dir = root / "train", root / "test"
    train_dir.mkdir()
    test_dir.mkdir()
    for i, p in enumerate(paths):
        p.rename((train_dir if i < N_TRAIN else test_dir) / p.name)
    seconds["gen"] = time.perf_counter() - t0

    t = time.perf_counter()
    state, logs = pipeline.train(cfg, pipeline.load_scenes(train_dir))
    checkpoint = root / "model.ckpt"
    save_checkpoint(state, checkpoint)
    seconds["train"] = time.perf_counter() - t

    t = time.perf_counter()
    pred_dir = root / "pred"
    pipeline.segment_files(state, cfg, pipeline.scene_files(test_dir), pred_dir)
    seconds["segment"] = time.perf_counter() - t

    t = time.perf_counter()
    report = pipeline.evaluate_dirs(pred_dir, test_dir, root / "report")
    seconds["eval"] = time.perf_counter() - t
    seconds["total"] = time.perf_counter() - t0
    return TrainedRun(cfg, state, logs, root, train_dir, test_dir, pred_dir, checkpoint, report, seconds)


def mean_loss(logs, start, stop):
    return float(np.mean([e.total for e in logs[start:stop]]))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
