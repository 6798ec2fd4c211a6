import warnings

import pytest

from msbasis.errors import RankDeficiencyWarning, ResolutionWarning


@pytest.fixture(autouse=True)
def _quiet_expected_warnings():
    # small test grids under-resolve the random lattice and have short edges
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
