import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egpa.ingestion import LabeledSample  # noqa: E402
from egpa.skeleton import AssessmentLabels, MotionSequence, chain_topology, kinect_v2_topology  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def kinect():
    return kinect_v2_topology()


@pytest.fixture
def chain3():
    return chain_topology(3)


def random_sequence(rng, T=6, N=5, subject="s", exercise="e", scale=1.0):
    return MotionSequence(rng.normal(scale=scale, size=(T, N, 3)), 30.0, subject, exercise)


def sample(seq, sid="x", has_error=False, error_type="none", score=8.0, cls=0):
    return LabeledSample(sid, seq, AssessmentLabels(cls, has_error, error_type, score))


# Acceptance criteria record (number -> (title, passed, seconds, budget)) here;
# the summary hook prints one line per criterion after the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, passed, seconds, budget = ACCEPTANCE[num]
        limit = f" (budget {budget:g}s)" if budget else ""
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] C{num:<2} {title}: {seconds:.2f}s{limit}")
