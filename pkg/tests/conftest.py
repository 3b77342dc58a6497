import numpy as np
import pytest

from idensenet.flow import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """Two dense blocks of depth 2: cheap enough for finite differences."""
    return build_model(n_blocks=2, depth=2, growth=8, rng=np.random.default_rng(7))


@pytest.fixture
def small_residual_model():
    return build_model(n_blocks=2, depth=2, growth=8, kind="residual", rng=np.random.default_rng(8))


# one summary line per acceptance criterion; tests in test_acceptance.py are
# named ``test_cNN_...`` and a criterion passes only if all of its tests pass
_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_c"):
        return
    if report.when == "call" or report.outcome != "passed":
        key = int(name[6:8])
        outcome = "skipped" if report.skipped else report.outcome
        prev = _CRITERIA.get(key, "passed")
        rank = {"passed": 0, "skipped": 1, "failed": 2}
        _CRITERIA[key] = max(prev, outcome, key=rank.__getitem__)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "NOT RUN"}
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {key:2d}: {label[_CRITERIA[key]]}")
