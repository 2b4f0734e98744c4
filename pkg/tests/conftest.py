from collections import defaultdict

import numpy as np
import pytest

from damagelab.ingest import DamageClass, DisasterType, iter_scene_pairs
from damagelab.preprocess import BuildingRecord, build_records
from damagelab.synthdata import SynthParams, generate

_criteria = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[marker.args[0]].append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = [o for _, o in _criteria[number]]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        names = ", ".join(n for n, _ in _criteria[number])
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  ({names})")


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Three 512-px scenes, 30 buildings each, some unclassified."""
    params = SynthParams(n_scenes=3, buildings_per_scene=30, image_side=512, seed=11, unclassified_rate=0.1)
    return generate(params, tmp_path_factory.mktemp("small_root"))


@pytest.fixture(scope="session")
def small_records(small_root):
    return build_records(iter_scene_pairs(small_root), crop_side=32)


def make_record(label, uid, side=16, disaster=DisasterType.WIND, seed=0, identical=False):
    rng = np.random.default_rng(seed)
    pre = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
    post = pre.copy() if identical else rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
    return BuildingRecord(pre, post, DamageClass(label), disaster, 2500, "scene", uid)


@pytest.fixture
def record_factory():
    return make_record
