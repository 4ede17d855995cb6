"""Exit criteria, each run once at its stated tolerance and time limit."""
import pytest

from conftest import CRITERIA_LINES
from spinemu import selftest

pytestmark = pytest.mark.acceptance

SEED = 0


@pytest.fixture(scope="module")
def first_run():
    results = {}
    for fn in selftest.ALL:
        res = fn(seed=SEED)
        print(res.line())
        CRITERIA_LINES.append(res.line())
        results[res.number] = res
    return results


def check(res):
    assert res.ok, res.line()


@pytest.mark.parametrize("number,name", [
    (1, "matcher"), (2, "allocator"), (3, "ordering"), (4, "pingpong"),
    (5, "slmp"), (6, "ddt"), (7, "overlap"),
])
def test_criterion(first_run, number, name):
    res = first_run[number]
    assert res.name == name
    check(res)


def test_criterion_8_determinism(first_run):
    res = selftest.criterion_8([first_run[n] for n in range(1, 7)], SEED)
    print(res.line())
    CRITERIA_LINES.append(res.line())
    check(res)
