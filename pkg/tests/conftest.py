import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def domain():
    from procplan.minecraft import minecraft_domain
    return minecraft_domain()


@pytest.fixture(scope="session")
def small_suite():
    from procplan.experiments import SuiteSpec, build_suite
    return build_suite(SuiteSpec(grid_w=3, grid_h=3, n_train=12, n_test=6, seed=3))


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one summary line per acceptance criterion for the terminal report."""
    lines = {}
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
