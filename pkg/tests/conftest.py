import os

import pytest
from hypothesis import HealthCheck, settings

import fmscan
from fmscan import make_test_region

settings.register_profile(
    "fmscan",
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("fmscan")


def _clean_up_defaults():
    for key in list(os.environ):
        if key.startswith("fmscan_"):
            os.environ.pop(key)


@pytest.fixture(autouse=True)
def user_defaults(tmp_path, monkeypatch):
    """Point the user defaults file into a temporary directory."""
    pth = tmp_path / ".fmscan"
    monkeypatch.setattr(fmscan.set_up, "_CONFIG_PTH", pth)
    _clean_up_defaults()
    yield pth
    _clean_up_defaults()


def pytest_addoption(parser):
    parser.addoption(
        "--family",
        action="append",
        default=["poisson"],
        help="list of outcome families to test",
    )
    parser.addoption(
        "--study",
        action="store_true",
        default=False,
        help="run the long simulation study checks",
    )


def pytest_generate_tests(metafunc):
    if "test_region" in metafunc.fixturenames:
        fams = sorted(set(metafunc.config.getoption("family")))
        metafunc.parametrize("test_region", fams, indirect=True)


def pytest_collection_modifyitems(config, items):
    if config.getoption("study"):
        return
    skip = pytest.mark.skip(reason="needs --study")
    for item in items:
        if "study" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def test_region(request):
    if request.param not in ("poisson", "bernoulli", "gaussian"):
        raise ValueError("invalid test command line input")
    return request.param, make_test_region(n=20, seed=0, family=request.param)


@pytest.fixture(scope="session")
def region():
    return make_test_region(n=20, seed=0)


@pytest.fixture()
def inputs(tmp_path, region):
    """CSV inputs of the poisson test region."""
    return region.write(tmp_path / "inputs")
