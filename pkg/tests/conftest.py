import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

MOVIELENS_CANDIDATES = (
    os.environ.get("UPGREC_MOVIELENS", ""),
    str(Path(__file__).parent.parent / "data" / "ml-1m" / "ratings.dat"),
)


def movielens_path():
    for p in MOVIELENS_CANDIDATES:
        if p and Path(p).is_file():
            return p
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
