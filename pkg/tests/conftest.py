from __future__ import annotations

import pytest

from helpers import ACCEPTANCE


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on simulated fleets")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(12345)
