from pathlib import Path

import pytest

from dynacl.engine import Engine
from dynacl.model import parse_exception_list

DATA = Path(__file__).parent / "data"


class FakeClock:
    def __init__(self, t: float = 1000.0):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float):
        self.t += dt


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def worked_base_text():
    return (DATA / "worked_base.acl").read_text()


@pytest.fixture
def worked_groups_text():
    return (DATA / "worked_groups.conf").read_text()


@pytest.fixture
def worked_exceptions():
    """The worked-example exceptions keyed by their labels ("0.0" ... "2.1")."""
    labels = []
    for line in (DATA / "worked_exceptions.acl").read_text().splitlines():
        tok = line.split()
        if tok and not tok[0].startswith("#"):
            labels.append(tok[0])
    rules = parse_exception_list((DATA / "worked_exceptions.acl").read_text())
    return dict(zip(labels, rules))


@pytest.fixture
def worked_engine(worked_base_text, worked_groups_text, clock):
    return Engine.load(worked_base_text, worked_groups_text, clock=clock)


# -- acceptance summary ----------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = ""
    for key, value in report.user_properties:
        if key == "detail":
            detail = value
    _criteria[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in sorted(_criteria.items()):
        terminalreporter.write_line(f"[{status}] {name} {detail}".rstrip())
