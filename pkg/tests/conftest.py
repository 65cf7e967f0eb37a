import numpy as np
import pytest

from pseudohealthy.phantom import PhantomParams, synthetic_atlas
from pseudohealthy.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_atlas():
    return synthetic_atlas((32, 32, 32), spacing=(6.0, 6.0, 6.0))


@pytest.fixture(scope="session")
def small_params():
    return PhantomParams(dims=(32, 32, 32), spacing_mm=(6.0, 6.0, 6.0), n_subjects=12,
                         sessions_per_subject=3, session_noise_sigma=0.03)


def random_volume(rng, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    return Volume(rng.random(dims), spacing)


# ------------------------------------------------------------ acceptance lines

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def details(request):
    """Free-form measurements a criterion test reports next to its verdict."""
    request.node.criterion_details = {}
    return request.node.criterion_details


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    found = getattr(item, "criterion_details", {})
    text = ", ".join(f"{k}={_fmt(v)}" for k, v in found.items())
    verdict = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE[number] = f"criterion {number:2d} {verdict}  {title}" + (f"  [{text}]" if text else "")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + " ".join(_fmt(x) for x in v) + "]"
    return str(v)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
