import pytest

from fsgsim import apd
from fsgsim.alignment import SweepGrid, calibrate_all
from fsgsim.fsg import ControlDiagram, DiagramKind


@pytest.fixture(scope="session")
def d3_point():
    """Operating point for diagram 3 on the default bank, from the default grid."""
    return calibrate_all(apd.default_bank(), ControlDiagram(DiagramKind.D3), SweepGrid(), seed=1)


@pytest.fixture(scope="session")
def d3_fsg(d3_point):
    return d3_point.fsg_params(ControlDiagram(DiagramKind.D3))


# -- acceptance verdicts ---------------------------------------------------------------

VERDICTS: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(tag): acceptance criterion, reported as one PASS/FAIL line")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    VERDICTS[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(VERDICTS):
        verdict, detail = VERDICTS[tag]
        terminalreporter.write_line(f"{tag} {verdict}  {detail}")
