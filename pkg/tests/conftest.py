import numpy as np
import pytest

from attnshare.ditsim import ModelConfig
from attnshare.sharing import QkvBundle
from attnshare.tensor import Pcg32

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _criteria.append((marker.args[0], marker.args[1], report.passed, item.name))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, name in sorted(_criteria, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}  ({name})")


def random_bundle(rng: Pcg32, m: int, n: int, d: int) -> QkvBundle:
    return QkvBundle(*(rng.normal_matrix(r, d) for r in (m, m, m, n, n, n)))


def bundle_rows(b: QkvBundle) -> dict:
    return {role: getattr(b, role).tolist() for role in QkvBundle.ROLES}


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=4, heads=2, dim=16, text_len=2, grid=(2, 3), latent_channels=3, seed=11)


@pytest.fixture
def rng():
    return Pcg32(2024)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)
