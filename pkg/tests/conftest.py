import numpy as np
import pytest

from harvestkit.geometry import Box2D, Box3D, RecistMark
from harvestkit.tracker3d import Detection2D, Member, Proposal3D


def make_box(x1, y1, x2, y2):
    return Box2D(float(x1), float(y1), float(x2), float(y2))


def make_proposal(pid, vid, box, z1, z2, s_g=0.5, s_c=None, s=None, round=0):
    b = make_box(*box)
    members = tuple(Member(z, b, s_g) for z in range(z1, z2 + 1))
    return Proposal3D(pid, vid, Box3D.from_xy(b, z1, z2), members, s_g, s_c, s, round)


def make_mark(vid, lid, z, box, origin="original"):
    return RecistMark(vid, lid, z, make_box(*box), origin)


def make_det(vid, z, box, score):
    return Detection2D(vid, z, make_box(*box), score)


def random_int_box(rng, lo=0, hi=20):
    x1, x2 = sorted(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
    y1, y2 = sorted(rng.choice(np.arange(lo, hi + 1), 2, replace=False))
    return make_box(x1, y1, x2, y2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
