import importlib.util

import numpy as np
import pytest

from nesh import kernels
from nesh.phantom import default_phantom_spec, generate_phantom

HAVE_CYTHON = importlib.util.find_spec("nesh._ckernels") is not None

BACKENDS = ["python"] + (["cython"] if HAVE_CYTHON else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel backend by swapping the dispatch table."""
    impl = kernels.load_backend(request.param)
    for name in ("sh_basis", "catmull_rom_lines", "sym_eig3"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def noisy_phantom():
    return generate_phantom(default_phantom_spec(30, 0.05, seed=0))


@pytest.fixture(scope="session")
def clean_phantom():
    return generate_phantom(default_phantom_spec(30, 0.0, seed=0))


_ACCEPTANCE = {}


@pytest.fixture
def acceptance_results():
    return _ACCEPTANCE


_OUTCOMES = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if name.startswith("test_criterion_") and (report.when == "call" or report.failed):
        number = int(name.split("_")[2])
        if report.failed or number not in _OUTCOMES:
            _OUTCOMES[number] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE and not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number in _ACCEPTANCE:
            passed, detail = _ACCEPTANCE[number]
            passed = passed and _OUTCOMES.get(number) == "passed"
            terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        elif number in _OUTCOMES:
            terminalreporter.write_line(f"criterion {number:2d}: FAIL  (errored before reporting a result)")
        else:
            terminalreporter.write_line(f"criterion {number:2d}: NOT RUN")
