import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def scene_mesh():
    from resim.scenes import synthetic_scene

    return synthetic_scene()


@pytest.fixture(scope="session")
def scene_sequence(tmp_path_factory, scene_mesh):
    """Five 64-beam scans of the synthetic scene written as a sequence."""
    from resim.lidar import preset
    from resim.scenes import scene_poses, write_sequence

    out = tmp_path_factory.mktemp("scene_seq")
    return write_sequence(out, scene_mesh, preset("kitti"), scene_poses(), seed=0)


# --- acceptance summary -------------------------------------------------------
# Each acceptance test is marked with its criterion id; a criterion passes only
# if every test carrying that id passes. Measured values recorded with
# ``record_property`` are echoed on the criterion's line.

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    entry = _ACCEPTANCE.setdefault(marker.args[0], {"ok": True, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[1:])):
        e = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if e['ok'] else 'FAIL'}  " + " ".join(e["notes"]))
