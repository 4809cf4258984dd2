import numpy as np
import pytest

from objmap.geometry import CameraIntrinsics
from objmap.segmentation import FrameSegment, Region2D


@pytest.fixture
def small_intr():
    return CameraIntrinsics(fx=131.25, fy=131.25, cx=79.5, cy=59.5, width=160, height=120)


def make_segment(rid, size, instance=0, class_id=0, points=None):
    if points is None:
        points = np.zeros((size, 3))
    return FrameSegment(Region2D(rid, np.arange(size)), np.asarray(points, dtype=float), instance, class_id)


_ACCEPTANCE = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.note = number, title, ""
        self.soft_fail = False  # logged as FAIL without failing the test

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None and not self.soft_fail else "FAIL"
        line = f"ACCEPTANCE {self.number:>2} {status}  {self.title}" + (f"  [{self.note}]" if self.note else "")
        _ACCEPTANCE.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one PASS/FAIL line; ``c.note`` adds detail."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
