import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_acceptance_key = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_acceptance_key, {})

    def record(n, passed, detail):
        lines[n] = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_acceptance_key, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
