import json
from importlib import resources
from pathlib import Path

import pytest

from ibrpen.case import load_case, load_contingencies
from ibrpen.threshold import load_plan

DATA = Path(resources.files("ibrpen") / "data")
FIXTURES = Path(__file__).parent / "fixtures"
BUNDLED_CASES = ("twoarea.json", "twobus.json")


def data_path(name):
    return DATA / name


def read_json(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="session")
def twoarea():
    return load_case(DATA / "twoarea.json")


@pytest.fixture(scope="session")
def twoarea_raw():
    return read_json(DATA / "twoarea.json")


@pytest.fixture(scope="session")
def contingencies():
    return load_contingencies(DATA / "twoarea_contingencies.json")


@pytest.fixture(scope="session")
def plan():
    return load_plan(DATA / "twoarea_plan.json")


@pytest.fixture(scope="session")
def by_id(contingencies):
    return {c.id: c for c in contingencies}


ACCEPTANCE = []  # (number, passed, detail) in run order


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
