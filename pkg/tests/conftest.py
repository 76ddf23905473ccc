import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

ACCEPTANCE_RESULTS = []


def load_fixture(name):
    return json.loads((FIXTURES / f"{name}.json").read_text())


@pytest.fixture
def hand_rows():
    return [[1.0], [0.5, 0.5], [0.2, 0.3, 0.5]]


@pytest.fixture
def hand_trace(hand_rows):
    import numpy as np

    from kvevict import AttentionTrace

    s = np.zeros((1, 1, 3, 3))
    for q, r in enumerate(hand_rows):
        s[0, 0, q, : q + 1] = r
    return AttentionTrace(s)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{number:02d} {title}: {detail}")
