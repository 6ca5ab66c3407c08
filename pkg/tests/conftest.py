import numpy as np
import pytest

from unfoldstokes.systems import model_system

_LINES: dict[str, str] = {}


def record(criterion: int, ok: bool, detail: str, part: str = "") -> None:
    label = f"{criterion}{part}"
    _LINES[f"{criterion:02d}{part}"] = f"criterion {label:>3}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture
def report():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES):
        terminalreporter.write_line(_LINES[key])


@pytest.fixture(scope="session")
def ladder_system():
    """Fixed 2x2 test system with a nontrivial residual part."""
    return model_system([1, -1], [0.3, 0.1], np.array([[0.2, 0.5], [0.3, -0.1]]))
