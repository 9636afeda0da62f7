import pytest

from spotsgd.convergence import SgdConstants
from spotsgd.price_model import make_truncated_gaussian, make_uniform
from spotsgd.runtime import RuntimeModel

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def uniform():
    return make_uniform(0.2, 1.0)


@pytest.fixture
def gaussian():
    return make_truncated_gaussian(0.6, 0.175, 0.2, 1.0)


@pytest.fixture
def exp1():
    return RuntimeModel.exponential(1.0)


@pytest.fixture
def consts():
    # beta = 0.9, floor coefficient alpha L M / (2 c mu) = 0.2
    return SgdConstants(L=1.0, c=0.5, mu=1.0, mu_G=1.0, M=1.0, M_V=0.0, alpha=0.2, G0=1.0)


@pytest.fixture
def report_criterion(request, capsys):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
