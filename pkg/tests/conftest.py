"""Shared fixtures plus the acceptance summary hook.

Acceptance tests (tests/test_acceptance.py) register one result line per
criterion via the ``acceptance`` fixture; the terminal summary prints
them as ``ACCEPTANCE <n>: PASS|FAIL — <detail>`` so the verdict of every
criterion is visible in one place even on partial failures.
"""

from __future__ import annotations

import numpy as np
import pytest

_ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


class AcceptanceRecorder:
    def record(self, criterion: int, passed: bool, detail: str):
        _ACCEPTANCE_RESULTS[criterion] = ("PASS" if passed else "FAIL", detail)

    def check(self, criterion: int, passed: bool, detail: str):
        self.record(criterion, passed, detail)
        assert passed, f"acceptance criterion {criterion}: {detail}"

    def skip(self, criterion: int, detail: str):
        _ACCEPTANCE_RESULTS[criterion] = ("SKIP", detail)


@pytest.fixture
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion in sorted(_ACCEPTANCE_RESULTS):
        verdict, detail = _ACCEPTANCE_RESULTS[criterion]
        terminalreporter.write_line(f"ACCEPTANCE {criterion}: {verdict} — {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
