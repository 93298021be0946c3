import numpy as np
import pytest
from hypothesis import settings

import mfgp  # noqa: F401  (enables float64 in jax)

settings.register_profile("mfgp", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("mfgp")


def pytest_collection_modifyitems(config, items):
    """Run the function-value spot checks before anything that trains a model."""
    first = [it for it in items if it.get_closest_marker("spot_check")]
    rest = [it for it in items if not it.get_closest_marker("spot_check")]
    items[:] = first + rest


def pytest_configure(config):
    config.addinivalue_line("markers", "spot_check: function-value oracle checks, run first")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(acceptance_log.LINES.items()):
            terminalreporter.write_line(line)
