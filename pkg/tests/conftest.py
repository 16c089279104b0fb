import numpy as np
import pytest

from uncertain_retrieval import synthdata

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return synthdata.SynthSpec(n_concepts=4, n_train=96, n_eval=40, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return synthdata.generate(small_spec)


@pytest.fixture(scope="session")
def default_dataset():
    return synthdata.generate(synthdata.SynthSpec())


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(criterion, passed, detail=""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")
