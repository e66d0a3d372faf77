import numpy as np
import pytest

from dcb.panel import PanelDataset
from dcb.simulation import SimConfig, generate_dataset


@pytest.fixture(scope="session")
def small_sim():
    """A modest two-period panel from the simulation design."""
    return generate_dataset(SimConfig(n=200, T=2, p=10, eta=0.3), 11)


@pytest.fixture(scope="session")
def small_sim3():
    return generate_dataset(SimConfig(n=300, T=3, p=8, eta=0.3), 5)


def random_panel(rng, n=30, T=2, p=2):
    x = rng.standard_normal((n, T, p))
    d = rng.integers(0, 2, size=(n, T))
    y = rng.standard_normal((n, T))
    return PanelDataset(x, d, y)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "acceptance" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[props["acceptance"]] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
