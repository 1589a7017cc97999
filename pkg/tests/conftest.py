import numpy as np
import pytest
import torch

from stormlab.backends import MockOracleRater, TagBasisEncoder
from stormlab.core import ImageSample, Source, Weather, seeded_rng
from stormlab.toydata import make_toy_fixture

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("STORMLAB_SEED", raising=False)


@pytest.fixture(scope="session")
def small_fixture():
    """A 32×32 toy fixture small enough for per-test training runs."""
    return make_toy_fixture(0, n_labeled=8, n_unlabeled=8, n_heldout=4, n_references=4, size=32)


@pytest.fixture(scope="session")
def toy_fixture():
    return make_toy_fixture(0)


@pytest.fixture
def rng():
    return seeded_rng(1234)


@pytest.fixture
def tag_encoder():
    return TagBasisEncoder("mock-tag", dim=16, prompt_width=16)


def make_image(image_id="img", value=0.5, shape=(16, 16), tag=None, source=Source.REAL):
    return ImageSample(image_id, np.full((*shape, 3), value), tag, source)


def oracle_pair(clean):
    """The two oracle judges used across the toy fixture."""
    return [MockOracleRater("oracle-mae", clean, metric="mae", scale=10.0, saturation=0.3),
            MockOracleRater("oracle-rmse", clean, metric="rmse", scale=8.0, saturation=0.35)]


@pytest.fixture
def weather_references(tag_encoder):
    """Four classes × eight tagged references for the orthonormal encoder."""
    refs = {}
    for k, weather in enumerate(Weather):
        refs[weather] = [make_image(f"{weather.value}{i}", 0.1 * k + 0.01 * i, tag=weather)
                         for i in range(8)]
    return refs


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    n = marker.args[0]
    passed, details = _CRITERIA.get(n, (True, []))
    details = details + [v for k, v in item.user_properties if k == "detail"]
    _CRITERIA[n] = (passed and rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, details = _CRITERIA[n]
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}"
        if details:
            line += " (" + "; ".join(dict.fromkeys(details)) + ")"
        terminalreporter.write_line(line)
