import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scenegraph.model import ModelConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Narrow widths keep unit tests fast; the full-width model is exercised by the
# acceptance module.
TINY = ModelConfig(d_model=16, d_head=4, n_heads=2, d_ff=24, n_blocks=2, d_fuse=12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return TINY


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts (one line per criterion) at the end of the run."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
