import numpy as np
import pytest

# One pass/fail line per acceptance criterion at the end of the run.
_acceptance_results = []


def record_acceptance(name, passed, detail=""):
    _acceptance_results.append((name, passed, detail))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _acceptance_results:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
