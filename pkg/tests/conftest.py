import numpy as np
import pytest

from dmdcast import gridstore

# Lines collected by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_series(rng, ntime=36, nlat=3, nlon=4, start=(1980, 1), mask=None, **kw):
    values = rng.standard_normal((ntime, nlat, nlon))
    if mask is None:
        mask = np.ones((nlat, nlon), dtype=bool)
    return gridstore.GridSeries(values=values, mask=mask, times=gridstore.month_range(start, ntime), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def series(rng):
    mask = np.ones((3, 4), dtype=bool)
    mask[0, 0] = mask[2, 3] = False
    return make_series(rng, ntime=48, mask=mask, variable="sst", units="K")
