import numpy as np
import pytest

from dmsp.data import MultiSourceDataset, ScrConfig, SourceDataset, generate_scr


def random_dataset(seed, sizes=(6, 6), feature_dims=(2, 3), timestamps=1, scale=5.0):
    rng = np.random.default_rng(seed)
    sources = []
    for i, (n, p) in enumerate(zip(sizes, feature_dims)):
        sources.append(SourceDataset(i, rng.uniform(0, scale, size=(n, 2)), rng.normal(size=(n, p)),
                                     rng.normal(size=n), rng.integers(0, timestamps, size=n)))
    return MultiSourceDataset(tuple(sources))


@pytest.fixture
def tiny():
    return random_dataset(0)


@pytest.fixture(scope="session")
def small_scr():
    return generate_scr(ScrConfig(grid_size=24, length_scale=3.0, n_high=30, n_low=90), seed=4)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Store one acceptance verdict line for the terminal summary."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def _record(number, passed, detail):
        store[number] = (bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
