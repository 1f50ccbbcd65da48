"""Shared test configuration.

Runtime invariant checks are off by default in the library; the tests
turn them on globally so every constructed point and tangent vector is
revalidated while the suite runs.
"""

import pytest

from r3mc import enable_invariant_checks


@pytest.fixture(autouse=True, scope="session")
def _invariant_checks():
    enable_invariant_checks(True)
    yield
    enable_invariant_checks(False)
