import sys

import numpy as np
import pytest

from zigzag_lab.config import reference_config
from zigzag_lab.sampler import initial_latents, trajectory_rngs
from zigzag_lab.score import AnalyticMixtureModel


@pytest.fixture
def ref():
    cfg = reference_config()
    sched = cfg.build_schedule()
    return cfg, sched, AnalyticMixtureModel(cfg.mixture, sched)


def latents(seed, n, dim=2):
    rngs = trajectory_rngs(seed, n)
    return rngs, initial_latents(rngs, dim)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
