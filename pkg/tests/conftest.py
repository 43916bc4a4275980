import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@functools.lru_cache(maxsize=None)
def _smoke():
    from waver.experiments import run_smoke

    return run_smoke(16)


@pytest.fixture(scope="session")
def smoke():
    return _smoke()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    from waver.ingest import generate_synthetic

    return generate_synthetic(3, 12, 3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS, key=mod.criterion_sort_key):
        terminalreporter.write_line(mod.format_line(key))
