import numpy as np
import pytest

from marginkd.synthdata import generate_multiview


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed training experiments, run with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def unit_rows():
    """unit_rows(rng, n, d) -> (n, d) array of random unit vectors."""

    def make(rng, n, d):
        x = rng.standard_normal((n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    return make


@pytest.fixture(scope="session")
def small_ds():
    return generate_multiview(c=3, views_per_class=2, per_view=10, d_in=4, class_sep=4.0, view_sep=1.5,
                              noise=0.3, seed=0)


@pytest.fixture(scope="session")
def separable_ds():
    return generate_multiview(c=2, views_per_class=1, per_view=40, d_in=4, class_sep=6.0, view_sep=1.0,
                              noise=0.2, seed=1)
