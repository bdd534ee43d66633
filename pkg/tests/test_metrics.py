from fractions import Fraction

import numpy as np
import pytest

from harvestkit.errors import InputError
from harvestkit.geometry import Box3D
from harvestkit.metrics import (
    GroundTruth3D,
    average_precision,
    froc_curve,
    match_all,
    mean_recall,
    pearson,
    pr_curve,
    recall_at_fp,
    recall_at_precision,
)
from harvestkit.tracker3d import Member, Proposal3D

from conftest import make_box, make_mark, make_proposal


def mark_box(j):
    return (20 * j, 0, 20 * j + 10, 10)


def on_mark(pid, j, score, vid="v"):
    return make_proposal(pid, vid, mark_box(j), 4, 6, s_g=score)


def off_mark(pid, score, vid="v"):
    return make_proposal(pid, vid, (500, 500, 510, 510), 4, 6, s_g=score)


def brute_force(targets, scores, n_marks, n_volumes):
    """Every operating point by direct enumeration, in exact arithmetic.

    ``targets[i]`` is the set of marks proposal ``i`` matches."""
    points = []
    for t in sorted(set(scores), reverse=True):
        chosen = [i for i, s in enumerate(scores) if s >= t]
        tp = sum(1 for i in chosen if targets[i])
        hit = set().union(*(targets[i] for i in chosen))
        points.append((t, Fraction(tp, len(chosen)), Fraction(len(hit), n_marks), Fraction(len(chosen) - tp, n_volumes)))
    ap = Fraction(0)
    levels = sorted({r for _, _, r, _ in points})
    prev = Fraction(0)
    for r in levels:
        env = max(p for _, p, rr, _ in points if rr >= r)
        ap += (r - prev) * env
        prev = r
    return points, ap


def random_instance(rng, n_max=10):
    n_marks = int(rng.integers(1, 5))
    n_props = int(rng.integers(1, n_max + 1))
    marks = [make_mark("v", f"g{j}", 5, mark_box(j)) for j in range(n_marks)]
    props, targets, scores = [], [], []
    for i in range(n_props):
        s = float(rng.integers(1, 8)) / 8  # ties on purpose
        j = int(rng.integers(-1, n_marks))
        props.append(off_mark(f"p{i}", s) if j < 0 else on_mark(f"p{i}", j, s))
        targets.append(set() if j < 0 else {j})
        scores.append(s)
    return props, marks, targets, scores


class TestMatching:
    def test_exact_hit(self):
        r = match_all([on_mark("p", 0, 0.9)], [make_mark("v", "g0", 5, mark_box(0))])
        assert r.is_tp.tolist() == [True] and r.recalled.tolist() == [True]

    def test_duplicates_add_no_recall_and_no_fp(self):
        marks = [make_mark("v", "g0", 5, mark_box(0)), make_mark("v", "g1", 5, mark_box(1))]
        one = match_all([on_mark("a", 0, 0.9)], marks)
        two = match_all([on_mark("a", 0, 0.9), on_mark("b", 0, 0.8)], marks)
        assert two.recalled.sum() == one.recalled.sum() == 1
        assert two.is_tp.all()
        assert two.claimed.tolist() == [0, -1]

    def test_adjacent_slice_splits_p3d_from_recist2d(self):
        b = make_box(*mark_box(0))
        p = Proposal3D("p", "v", Box3D.from_xy(b, 4, 6), (Member(4, b, 0.9), Member(6, b, 0.9)), 0.9)
        marks = [make_mark("v", "g0", 5, mark_box(0))]
        assert match_all([p], marks, "p3d").is_tp.tolist() == [True]
        assert match_all([p], marks, "recist2d").is_tp.tolist() == [False]

    def test_iou3d_needs_3d_truth(self):
        with pytest.raises(InputError):
            match_all([on_mark("p", 0, 0.5)], [], "iou3d")

    def test_iou3d_threshold(self):
        gt = [GroundTruth3D("v", "g", Box3D(0, 0, 10, 10, 0, 9))]
        near = make_proposal("a", "v", (0, 0, 10, 10), 0, 2, s_g=0.9)  # 3/10
        far = make_proposal("b", "v", (0, 0, 10, 10), 0, 1, s_g=0.8)  # 2/10
        r = match_all([near, far], (), "iou3d", gt3d=gt)
        assert r.is_tp.tolist() == [True, False]

    def test_unknown_mode(self):
        with pytest.raises(InputError):
            match_all([], [], "bogus")

    def test_p3d_recall_dominates_recist2d(self, rng):
        for _ in range(100):
            marks = [make_mark("v", f"g{j}", int(rng.integers(2, 8)), mark_box(j)) for j in range(3)]
            props = []
            for i in range(6):
                j = int(rng.integers(0, 3))
                z1 = int(rng.integers(0, 8))
                zs = [z for z in range(z1, z1 + 3) if rng.random() < 0.7] or [z1]
                b = make_box(*mark_box(j))
                props.append(Proposal3D.from_members(f"p{i}", "v", [Member(z, b, 0.5) for z in zs]))
            p3 = match_all(props, marks, "p3d").recalled.sum()
            r2 = match_all(props, marks, "recist2d").recalled.sum()
            assert p3 >= r2


class TestPR:
    def worked(self):
        marks = [make_mark("v", "g1", 5, mark_box(0)), make_mark("v", "g2", 5, mark_box(1))]
        props = [on_mark("a", 0, 0.9), off_mark("b", 0.8), on_mark("c", 1, 0.7)]
        return match_all(props, marks)

    def test_worked_example(self):
        curve = pr_curve(self.worked())
        assert curve.precision.tolist() == [1.0, 0.5, 2 / 3]
        assert curve.recall.tolist() == [0.5, 0.5, 1.0]
        assert average_precision(curve) == pytest.approx(0.8333, abs=5e-5)
        assert average_precision(curve) == float(Fraction(5, 6))

    def test_recall_at_precision(self):
        curve = pr_curve(self.worked())
        assert recall_at_precision(curve, 0.8) == 0.5
        assert recall_at_precision(curve, 0.6) == 1.0
        assert mean_recall(curve) == 0.5

    def test_perfect(self):
        marks = [make_mark("v", f"g{j}", 5, mark_box(j)) for j in range(3)]
        curve = pr_curve(match_all([on_mark(f"p{j}", j, 0.9 - j / 10) for j in range(3)], marks))
        assert average_precision(curve) == 1.0
        assert recall_at_precision(curve, 0.95) == 1.0

    def test_all_misses(self):
        r = match_all([off_mark("p", 0.9)], [make_mark("v", "g", 5, mark_box(0))])
        curve = pr_curve(r)
        assert average_precision(curve) == 0.0 and recall_at_precision(curve, 0.8) == 0.0

    def test_no_marks(self):
        with pytest.raises(InputError):
            pr_curve(match_all([off_mark("p", 0.9)], []))

    def test_exhaustive_enumeration(self, rng):
        for _ in range(500):
            props, marks, targets, scores = random_instance(rng)
            res = match_all(props, marks)
            points, ap = brute_force(targets, scores, len(marks), res.n_volumes)
            curve = pr_curve(res)
            assert curve.thresholds.tolist() == [t for t, *_ in points]
            assert curve.precision.tolist() == [float(p) for _, p, _, _ in points]
            assert curve.recall.tolist() == [float(r) for _, _, r, _ in points]
            assert average_precision(curve) == float(ap)
            froc = froc_curve(res)
            assert froc.fp_per_volume.tolist() == [float(f) for *_, f in points]


def random_match_result(rng):
    props, marks, _, _ = random_instance(rng, n_max=25)
    return match_all(props, marks, n_volumes=int(rng.integers(1, 4)))


class TestMonotonicity:
    def test_curves_over_random_results(self, rng):
        for _ in range(1000):
            res = random_match_result(rng)
            pr, fr = pr_curve(res), froc_curve(res)
            # thresholds descend, so recall and FP rate may only grow along the arrays
            assert np.all(np.diff(pr.thresholds) < 0)
            assert np.all(np.diff(pr.recall) >= 0)
            assert np.all(np.diff(fr.fp_per_volume) >= 0)
            assert np.all(np.diff(fr.recall) >= 0)
            assert np.all(pr.recall <= 1.0)
            assert 0.0 <= average_precision(pr) <= 1.0


class TestFROC:
    def test_interpolation_example(self):
        marks = [make_mark("v0", f"g{j}", 5, mark_box(j)) for j in range(5)]
        props = [on_mark("a", 0, 0.9, "v0"), on_mark("b", 1, 0.9, "v0"),
                 off_mark("c", 0.5, "v0"), off_mark("d", 0.5, "v1"), on_mark("e", 2, 0.5, "v0")]
        fr = froc_curve(match_all(props, marks, n_volumes=2))
        assert fr.fp_per_volume.tolist() == [0.0, 1.0]
        assert fr.recall.tolist() == [0.4, 0.6]
        assert recall_at_fp(fr, [0.5]) == [pytest.approx(0.5)]

    def test_perfect_detector(self):
        fr = froc_curve(match_all([on_mark("a", 0, 0.9)], [make_mark("v", "g", 5, mark_box(0))]))
        assert recall_at_fp(fr, [0.0, 1.0]) == [1.0, 1.0]

    def test_clamping(self):
        marks = [make_mark("v", f"g{j}", 5, mark_box(j)) for j in range(2)]
        props = [off_mark("a", 0.9), on_mark("b", 0, 0.8), off_mark("c", 0.7), on_mark("d", 1, 0.6)]
        fr = froc_curve(match_all(props, marks, n_volumes=1))
        # the lowest achieved rate is 1 FP, where the better of the two points has recall 0.5
        assert recall_at_fp(fr, [0.125, 99]) == [0.5, 1.0]

    def test_empty_curve(self):
        fr = froc_curve(match_all([], [make_mark("v", "g", 5, mark_box(0))]))
        assert recall_at_fp(fr, [1.0]) == [0.0]


class TestPearson:
    def test_identical(self):
        assert pearson([1, 2, 3.5], [1, 2, 3.5]) == pytest.approx(1.0)

    def test_negated(self):
        assert pearson([1, 2, 3.5], [-1, -2, -3.5]) == pytest.approx(-1.0)

    def test_closed_form(self):
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(9 / 84 ** 0.5, rel=1e-12)
        assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198, abs=1e-5)

    @pytest.mark.parametrize("xs, ys", [([1, 1, 1], [1, 2, 3]), ([1], [2]), ([1, 2], [1, 2, 3])])
    def test_undefined(self, xs, ys):
        with pytest.raises(InputError):
            pearson(xs, ys)
