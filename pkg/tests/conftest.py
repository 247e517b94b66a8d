import numpy as np
import pytest

from cdiffset.data import SceneSpec, render_scene
from cdiffset.vae import train_vae


@pytest.fixture(scope="session")
def tiny_scenes():
    spec = SceneSpec(image_size=16, misalign_max=1.0, discrepancy_prob=0.5)
    return [render_scene(spec, s) for s in range(16)]


@pytest.fixture(scope="session")
def tiny_vae(tiny_scenes):
    vae, _ = train_vae(np.stack([p.eo for p in tiny_scenes]), steps=40, batch_size=4, seed=3, log_every=0)
    return vae


# -- acceptance reporting: one pass/fail line per criterion ------------------
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        prev = _CRITERIA.get(number)
        status = "FAIL" if failed or (prev and prev[1] == "FAIL") else ("SKIP" if report.skipped else "PASS")
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
