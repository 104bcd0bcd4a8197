import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from migrate_fuse import synthgen  # noqa: E402
from migrate_fuse.geo import build_hierarchy  # noqa: E402


@pytest.fixture(scope="session")
def world():
    return synthgen.make_world()


@pytest.fixture(scope="session")
def truth(world):
    return synthgen.gen_ground_truth(world)


@pytest.fixture
def small_h():
    """Six CBGs, three tracts, two counties in one state plus one in another."""
    recs = [
        ("010010001001", "01001000100", "01001", "01", (33.0, -86.0)),
        ("010010001002", "01001000100", "01001", "01", (33.01, -86.0)),
        ("010030002001", "01003000200", "01003", "01", (33.5, -86.5)),
        ("010030002002", "01003000200", "01003", "01", (33.52, -86.5)),
        ("020010003001", "02001000300", "02001", "02", (60.0, -150.0)),
        ("020010003002", "02001000300", "02001", "02", (60.05, -150.0)),
    ]
    return build_hierarchy(recs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
