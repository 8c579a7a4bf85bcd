import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ficd", deadline=None, derandomize=True, max_examples=100)
settings.load_profile("ficd")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, name, passed, detail):
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
