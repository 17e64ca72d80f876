import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mxml.dataio import SyntheticSpec, generate_synthetic_corpus

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticSpec(n_videos=6, clips=8, d_v=8, d_t=8,
                                                   queries_per_video=1, seed=3))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
