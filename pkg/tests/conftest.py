import pytest

from iit.tasks.conjunction import UPDATED_PARAMS, build_conjunction, conjunction_model
from iit.tasks.pvr import PvrTask, make_setting, pvr_model


def bits(b1, b2):
    return {"B1": bool(b1), "B2": bool(b2)}


@pytest.fixture
def conj():
    return conjunction_model()


@pytest.fixture
def toy():
    task, _ = build_conjunction()
    return task


@pytest.fixture
def toy_after():
    task, _ = build_conjunction(UPDATED_PARAMS)
    return task


@pytest.fixture(scope="session")
def pvr():
    return pvr_model()


@pytest.fixture
def pvr_task():
    return PvrTask(seed=0, block=4, hidden=8)


def digits(*labels):
    return make_setting(labels)


# one line per acceptance criterion, echoed after the test session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
