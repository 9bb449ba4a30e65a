import numpy as np
import pytest

from sessionlab.dataset import Dataset, ItemInfo, Session


def make_dataset(sessions, catalog=None):
    """Sessions given as item lists; session k starts at timestamp 100*k."""
    built = tuple(Session.from_items(f"s{k}", items, start_ts=100 * k)
                  for k, items in enumerate(sessions))
    items = sorted({i for s in sessions for i in s})
    catalog = catalog or {i: ItemInfo(f"name {i}") for i in items}
    return Dataset(built, catalog)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dataset_of(sessions):
    """Dataset over prebuilt Session objects with a placeholder catalog."""
    sessions = tuple(sessions)
    return Dataset(sessions, {i: ItemInfo(f"name {i}") for s in sessions for i in s.items})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
