import pytest

from datingrec.domain import DiscretizationPlan, UserProfile, UserSet
from datingrec.simulator import SimConfig, simulate

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def person(uid, gender, age=30, weight=70, height=170, income=5, child="no", **extra):
    feats = {"age": age, "weight": weight, "height": height, "income_level": income, "child_info": child}
    feats.update(extra)
    return UserProfile(uid, gender, feats)


RELATIVE_PLAN = {
    "age": [16, 25, 35, 100],
    "weight": [30, 60, 80, 250],
    "income_dif": [-20, -1, 1, 20],
    "child_info": ["no", "yes"],
    "height_dif": [-110, -5, 5, 110],
}


@pytest.fixture
def relative_plan():
    return DiscretizationPlan(RELATIVE_PLAN)


@pytest.fixture
def tiny_users():
    return UserSet([
        person("m1", "M", age=22, height=180, income=8),
        person("m2", "M", age=40, weight=90, height=175, income=2, child="yes"),
        person("f1", "F", age=28, weight=55, height=165, income=5),
        person("f2", "F", age=33, weight=62, height=180, income=12, child="yes"),
    ])


@pytest.fixture(scope="session")
def small_market():
    """600 users per gender in three regions, with replies."""
    cfg = SimConfig(users_per_gender=600, region_size=200, seed=11)
    res, prefs, enc = simulate(cfg)
    return cfg, res, prefs, enc
