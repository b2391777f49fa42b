import sys

import numpy as np
import pytest

from meshrecover.toy import bundled_template, octahedron_template


@pytest.fixture(scope="session")
def template():
    return bundled_template()


@pytest.fixture(scope="session")
def octa():
    return octahedron_template()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
