import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fhmm.labels import build_inventory, make_lexicon  # noqa: E402


@pytest.fixture
def inv3():
    return build_inventory(["a", "b", "c"])


@pytest.fixture
def lex3(inv3):
    return make_lexicon(inv3, {"AB": "a b", "AD": "a c", "B": "b"})


def pytest_runtest_logreport(report):
    if report.when == "call":
        for key, value in report.user_properties:
            if key == "acceptance":
                _ACCEPTANCE.append(value)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


_ACCEPTANCE: list[str] = []
