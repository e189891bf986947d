import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcmil import kernels
from mcmil.dataset import SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def numpy_backend():
    prev = kernels.set_backend("numpy")
    yield
    kernels.set_backend(prev)


@pytest.fixture(scope="session")
def small_ds():
    """Tiny 2-camera synthetic set; cheap enough to train on in unit tests."""
    return generate_synthetic(SyntheticSpec(feature_dim=8, scenes_per_class=6, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``record(number, ok, detail)``; every recorded line is echoed in the terminal summary.

    ``ok=None`` marks a skipped criterion.
    """

    def record(number, ok, detail):
        _CRITERIA[number] = (ok, detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA, key=lambda n: float(n)):
        ok, detail = _CRITERIA[number]
        verdict = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:<4}: {verdict}  {detail}")
