from __future__ import annotations

import sys

import pytest

from orderedwalks.walk import independent_components, simple_symmetric


@pytest.fixture(scope="session")
def ssrw2():
    return simple_symmetric(2)


@pytest.fixture(scope="session")
def ssrw3():
    return simple_symmetric(3)


@pytest.fixture(scope="session")
def lazy3():
    """d=3 walk whose components are lazy: J_1 is finite for this law."""
    return independent_components([{-1: 0.25, 0: 0.5, 1: 0.25}] * 3)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(module.RESULTS):
        ok, detail = module.RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
