import numpy as np
import pytest

from ekan.groups import BUILTIN_NAMES, builtin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BUILTIN_NAMES)
def group(request):
    return builtin(request.param)


def pytest_terminal_summary(terminalreporter):
    from _oracles import ACCEPTANCE_REPORT

    if ACCEPTANCE_REPORT:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_REPORT:
            terminalreporter.write_line(line)
