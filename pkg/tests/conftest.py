import os
import sys

from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
sys.path.insert(0, FIXTURES)

import pytest

from occdet.evaluation import get_subset, subset_filter
from occdet.io import group_by_image, read_annotations, read_detections

ANNOTATIONS = os.path.join(FIXTURES, "three_images.json")
DETECTIONS = os.path.join(FIXTURES, "three_images_dets.csv")


def load_fixture(subset="Reasonable"):
    images = read_annotations(ANNOTATIONS)
    dets = read_detections(DETECTIONS, {im.id for im in images})
    spec = get_subset(subset)
    return {k: (d, subset_filter(g, spec)) for k, (d, g) in group_by_image(images, dets).items()}


@pytest.fixture
def fixture_images():
    return load_fixture()


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number, name, passed, detail=""):
    line = f"acceptance {number} {name}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
