import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vdsfair.fixtures import fixture_a, fixture_b  # noqa: E402
from vdsfair.model import Allocation  # noqa: E402

# published example allocations, rows u1..u4, columns S1, S2
PSDSF_A = np.array([[2.0, 0.0], [6.0, 0.0], [0.0, 8.0], [0.0, 8.0]])
PSDSF_B = np.array([[2.0, 0.0], [6.0, 0.0], [0.0, 32 / 3], [0.0, 16 / 3]])


@pytest.fixture
def cluster_a():
    return fixture_a()


@pytest.fixture
def cluster_b():
    return fixture_b()


@pytest.fixture
def psdsf_a():
    return Allocation(PSDSF_A)


@pytest.fixture
def psdsf_b():
    return Allocation(PSDSF_B)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
