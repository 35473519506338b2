import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full-budget models (acceptance grid)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
    table = mod.RESULTS.get("_table")
    if table:
        terminalreporter.write_line("")
        terminalreporter.write_line("ablation table (M-STFT / MCD per cell and seed):")
        for row in table.splitlines():
            terminalreporter.write_line(row)
