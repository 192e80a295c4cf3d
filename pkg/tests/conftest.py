import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ptqflow import pipeline  # noqa: E402
from ptqflow.engine import load_dataset  # noqa: E402
from ptqflow.fixtures import FixtureSpec, write_fixture  # noqa: E402
from ptqflow.graph import load_model  # noqa: E402


@pytest.fixture(scope="session")
def std_fixture(tmp_path_factory):
    """The standard toy fixture: seed 0, 1000 samples, written once per session."""
    out = tmp_path_factory.mktemp("fixture")
    paths = write_fixture(FixtureSpec(), out)
    return paths


@pytest.fixture(scope="session")
def std_model(std_fixture):
    return load_model(std_fixture["model"])


@pytest.fixture(scope="session")
def std_data(std_fixture):
    return load_dataset(std_fixture["dataset"])


@pytest.fixture(scope="session")
def std_folded(std_model):
    return pipeline.prepare(std_model)


@pytest.fixture(scope="session")
def std_calib(std_folded, std_data):
    return pipeline.calibrate(std_folded, std_data[0], 1000, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
