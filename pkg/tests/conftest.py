"""Shared fixtures. The expensive one, `trained`, runs the full desk pipeline
(corpus -> RVQ -> contrastive encoders -> speech LM) exactly once per session
and records per-stage wall time so acceptance tests can check their budgets.
"""
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from facespeak.config import RunConfig, desk_config
from facespeak.workspace import Workspace


def desk_test_config() -> RunConfig:
    """Desk preset as used throughout the suite."""
    return desk_config()


@dataclass
class TrainedPipeline:
    ws: Workspace
    cfg: RunConfig
    contrastive_report: dict
    lm_report: dict
    stage_seconds: dict


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> TrainedPipeline:
    cfg = desk_test_config()
    ws = Workspace(Path(tmp_path_factory.mktemp("desk_ws")))
    times = {}

    t0 = time.monotonic()
    ws.stage_corpus(cfg)
    times["corpus"] = time.monotonic() - t0

    t0 = time.monotonic()
    ws.stage_rvq(cfg)
    times["rvq"] = time.monotonic() - t0

    t0 = time.monotonic()
    _, contrastive_report = ws.stage_encoders(cfg)
    times["encoders"] = time.monotonic() - t0

    t0 = time.monotonic()
    _, lm_report = ws.stage_lm(cfg)
    times["lm"] = time.monotonic() - t0

    return TrainedPipeline(ws, cfg, contrastive_report, lm_report, times)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion verdicts, which fd capture otherwise hides."""
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "CRITERION_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
