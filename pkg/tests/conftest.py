import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]


def data_dir() -> Path:
    """Dataset root: ``FSVI_DATA_DIR`` if set, else ``<repo>/data``."""
    return Path(os.environ.get("FSVI_DATA_DIR", REPO / "data"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
