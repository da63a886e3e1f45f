import numpy as np
import pytest
from hypothesis import settings

from seedcomplete.autodiff import get_default_dtype, set_default_dtype

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def float64_default():
    old = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
