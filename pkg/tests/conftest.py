import numpy as np
import pytest

from cardioprior import PhantomSpec, Volume3, generate

# One line per acceptance criterion, printed after the normal pytest summary
# so the pass/fail verdicts survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom_case():
    """One default jittered phantom (image, labels) at 48 cubed."""
    return generate(PhantomSpec(), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def label_volume(data, spacing=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0)):
    return Volume3(np.asarray(data, dtype=np.uint8), spacing, offset)
