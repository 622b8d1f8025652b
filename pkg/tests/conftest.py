import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def preset_runs():
    from edgetrain.pipeline import run_presets

    return run_presets()


@pytest.fixture(scope="session")
def calibrated(preset_runs):
    from edgetrain.pipeline import calibrated_hw

    return calibrated_hw(preset_runs)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
