import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from renalparse import _fallback, kernels  # noqa: E402

BACKENDS = {"python": _fallback}
try:
    from renalparse import _kernels

    BACKENDS["cython"] = _kernels
except ImportError:
    pass


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Run a test against each available kernel backend."""
    monkeypatch.setattr(kernels, "_impl", BACKENDS[request.param])
    return request.param


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(acceptance_log.RESULTS[n])
