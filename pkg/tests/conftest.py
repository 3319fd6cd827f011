import numpy as np
import pytest
from hypothesis import settings

from flam import synthdata as sd

settings.register_profile("flam", deadline=None, max_examples=40)
settings.load_profile("flam")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_schema():
    return sd.AttributeSchema(("shape", "color", "pattern"), (4, 4, 4))


@pytest.fixture(scope="session")
def small_dataset(small_schema):
    cfg = sd.GenConfig(dim=24, instances=240, views=2, style=0.2, noise=0.05)
    return sd.generate(cfg, small_schema, seed=3)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Criterion number -> PASS/FAIL line, echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: (isinstance(k, str), k)):
            terminalreporter.write_line(lines[key])
