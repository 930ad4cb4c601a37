import numpy as np
import pytest

from adakv import _pykernels, kernels
from adakv.engine import TinyModelConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TinyModelConfig(seed=0))


@pytest.fixture(params=["compiled", "python"])
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    if request.param == "compiled":
        if kernels.BACKEND != "cython":
            pytest.skip("compiled extension not built")
        return kernels
    monkeypatch.setattr(kernels, "quantize_rows", _pykernels.quantize_rows)
    monkeypatch.setattr(kernels, "hetero_attention", _pykernels.hetero_attention)
    return _pykernels


# filled by test_acceptance; echoed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
