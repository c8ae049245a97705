"""Shared small-grid fixtures: the default target on a coarse d = 3 grid."""

import pytest

from convexint.mikado import choose_exponents
from convexint.scheme import SchemeConfig, initial_data
from convexint.torus_field import GridSpec


@pytest.fixture(scope="session")
def exps3():
    return choose_exponents(3, 4 / 3, 1.0)


@pytest.fixture(scope="session")
def small_config(exps3):
    return SchemeConfig(exps3, GridSpec(3, 16, 33))


@pytest.fixture(scope="session")
def small_state(small_config):
    cfg = small_config
    return initial_data(cfg.target, cfg.grid, cfg.eps_tilde)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
