import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from yoloppa.tensor import Precision, precision

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    with precision(Precision.DOUBLE):
        yield


@pytest.fixture(scope="session")
def toy_sets():
    """300/60 synthetic images at 128 px, seed 0 (the acceptance toy set)."""
    from yoloppa.harness.synthetic import SyntheticConfig, generate_synthetic

    train = generate_synthetic(SyntheticConfig(num_images=300, seed=0, name_prefix="train"))
    val = generate_synthetic(SyntheticConfig(num_images=60, seed=1000, name_prefix="val"))
    return train, val


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
