import numpy as np
import pytest

from tbhsu.geometry import Aabb, Vec3
from tbhsu.scene_io import SceneObject, SceneRecord


def make_object(oid, label, centroid, region=None, half=0.1, obj_aff=None):
    c = Vec3.of(centroid)
    lo = Vec3.of(np.asarray(centroid) - half)
    hi = Vec3.of(np.asarray(centroid) + half)
    return SceneObject(
        object_id=oid,
        label=label,
        centroid=c,
        aabb=Aabb(lo, hi),
        region_affordance=region,
        object_affordance=obj_aff,
    )


def make_scene(specs, room_type="bedroom", scan_id="s0"):
    """specs: iterable of (label, centroid, region_affordance)."""
    return SceneRecord(
        scan_id=scan_id,
        room_type=room_type,
        objects=tuple(make_object(i, lab, c, reg) for i, (lab, c, reg) in enumerate(specs)),
    )


@pytest.fixture
def bedroom():
    return make_scene(
        [
            ("bed", (0.0, 0.0, 0.0), "for sleeping"),
            ("pillow", (0.2, 0.1, 0.5), "for sleeping"),
            ("lamp", (2.0, 2.0, 1.0), "for lighting"),
            ("wardrobe", (-2.0, 1.0, 0.0), "to store clothing"),
        ]
    )


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
