import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion.

    ``checks`` is a list of ``(name, ok, detail)``; failing details are shown.
    """

    def report(number: int, title: str, checks, summary: str = "") -> list[str]:
        failed = [f"{name}: {detail}" for name, ok, detail in checks if not ok]
        status = "FAIL" if failed else "PASS"
        line = f"[{status}] criterion {number}: {title}"
        if summary:
            line += f" ({summary})"
        if failed:
            line += " -- " + "; ".join(failed)
        _ACCEPTANCE_LINES[number] = line
        return failed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
