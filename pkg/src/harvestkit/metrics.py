"""Detection evaluation: matching, PR/FROC curves, AP and concordance.

Matching supports three rules:

``p3d``
    pseudo-3D: the mark's slice lies inside the proposal's z-range and the
    2D IoU of the xy extents reaches the threshold (0.5).
``iou3d``
    volumetric IoU against 3D ground-truth boxes (threshold 0.3).
``recist2d``
    the legacy key-slice rule: the proposal must own a member box on the
    mark's slice whose 2D IoU with the mark reaches 0.5.

A proposal matching any mark is a true positive. A mark is recalled at a
threshold once any proposal at or above that threshold matches it, so
duplicate detections of one lesion are neither false positives nor extra
recall.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InputError
from .geometry import Box3D, RecistMark, iou2d, iou3d, p3d_match
from .tracker3d import Proposal3D

__all__ = [
    "FP_RATES",
    "STANDARD_PRECISIONS",
    "FROCCurve",
    "GroundTruth3D",
    "MatchResult",
    "PRCurve",
    "average_precision",
    "froc_curve",
    "match_all",
    "mean_recall",
    "pearson",
    "pr_curve",
    "recall_at_fp",
    "recall_at_precision",
]

STANDARD_PRECISIONS = (0.80, 0.85, 0.90, 0.95)
FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
MODES = ("p3d", "iou3d", "recist2d")


@dataclass(frozen=True)
class GroundTruth3D:
    volume_id: str
    lesion_id: str
    box: Box3D

    @property
    def key(self) -> tuple[str, str]:
        return (self.volume_id, self.lesion_id)


@dataclass(frozen=True)
class MatchResult:
    """Per-proposal and per-mark outcome of matching.

    ``claimed`` holds, per proposal, the index of the mark it claimed in
    the greedy pass (``-1`` for none, including duplicates whose marks
    were already taken). ``mark_best`` is the highest score of any proposal
    matching each mark, ``-inf`` if none does.
    """

    scores: np.ndarray
    is_tp: np.ndarray
    claimed: np.ndarray
    mark_best: np.ndarray
    mark_keys: tuple[tuple[str, str], ...]
    n_volumes: int

    @property
    def n_marks(self) -> int:
        return len(self.mark_keys)

    @property
    def recalled(self) -> np.ndarray:
        return np.isfinite(self.mark_best)


def _score(p: Proposal3D) -> float:
    return p.s if p.s is not None else p.s_g


def match_all(
    proposals: Sequence[Proposal3D],
    marks: Sequence[RecistMark] = (),
    mode: str = "p3d",
    gt3d: Optional[Sequence[GroundTruth3D]] = None,
    n_volumes: Optional[int] = None,
    iou_thresh: Optional[float] = None,
) -> MatchResult:
    """Match scored proposals against ground truth.

    Proposals are ranked by lesion score ``s`` (falling back to ``s_g``).
    ``n_volumes`` defaults to the number of distinct volumes seen among
    proposals and ground truth.
    """
    if mode not in MODES:
        raise InputError(f"unknown match mode {mode!r}; expected one of {MODES}")
    if mode == "iou3d":
        if gt3d is None:
            raise InputError("iou3d mode needs 3D ground-truth boxes")
        gts: list = list(gt3d)
        thresh = 0.3 if iou_thresh is None else iou_thresh
    else:
        gts = list(marks)
        thresh = 0.5 if iou_thresh is None else iou_thresh

    by_vol: dict[str, list[int]] = defaultdict(list)
    for gi, g in enumerate(gts):
        by_vol[g.volume_id].append(gi)

    order = sorted(range(len(proposals)), key=lambda i: -_score(proposals[i]))
    scores = np.array([_score(p) for p in proposals], dtype=float)
    is_tp = np.zeros(len(proposals), dtype=bool)
    claimed = np.full(len(proposals), -1, dtype=int)
    mark_best = np.full(len(gts), -np.inf)
    taken = np.zeros(len(gts), dtype=bool)

    for i in order:
        p = proposals[i]
        best_gi, best_q = -1, -1.0
        for gi in by_vol.get(p.volume_id, ()):
            q = _quality(p, gts[gi], mode, thresh)
            if q is None:
                continue
            is_tp[i] = True
            mark_best[gi] = max(mark_best[gi], scores[i])
            if not taken[gi] and q > best_q:
                best_gi, best_q = gi, q
        if best_gi >= 0:
            taken[best_gi] = True
            claimed[i] = best_gi

    if n_volumes is None:
        n_volumes = len({p.volume_id for p in proposals} | {g.volume_id for g in gts})
    return MatchResult(scores, is_tp, claimed, mark_best, tuple(g.key for g in gts), n_volumes)


def _quality(p: Proposal3D, g, mode: str, thresh: float) -> Optional[float]:
    """Overlap of ``p`` with ``g`` when they match under ``mode``, else None."""
    if mode == "p3d":
        if not p3d_match(p.extent, g, thresh):
            return None
        return iou2d(p.extent.xy, g.box)
    if mode == "iou3d":
        q = iou3d(p.extent, g.box)
        return q if q >= thresh else None
    best = None
    for m in p.members:
        if m.z == g.z:
            q = iou2d(m.box, g.box)
            if q >= thresh and (best is None or q > best):
                best = q
    return best


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    # integer counts behind each point; let AP be computed exactly
    tp: Optional[np.ndarray] = None
    selected: Optional[np.ndarray] = None
    recalled: Optional[np.ndarray] = None
    n_marks: Optional[int] = None

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


@dataclass(frozen=True)
class FROCCurve:
    thresholds: np.ndarray
    fp_per_volume: np.ndarray
    recall: np.ndarray

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fp_per_volume.tolist(), self.recall.tolist()))


def _sweep(result: MatchResult):
    """Counts at every distinct score threshold, descending."""
    thresholds = np.unique(result.scores)[::-1]
    s_desc = np.sort(result.scores)[::-1]
    tp_desc = result.is_tp[np.argsort(-result.scores, kind="stable")]
    cum_tp = np.cumsum(tp_desc)
    # number of proposals with score >= t
    n_at = np.searchsorted(-s_desc, -thresholds, side="right")
    tp = cum_tp[n_at - 1] if len(thresholds) else np.zeros(0, dtype=int)
    fp = n_at - tp
    best = np.sort(result.mark_best[np.isfinite(result.mark_best)])
    recalled = len(best) - np.searchsorted(best, thresholds, side="left")
    return thresholds, tp, fp, recalled


def pr_curve(result: MatchResult) -> PRCurve:
    if result.n_marks == 0:
        raise InputError("a PR curve needs at least one ground-truth mark")
    thresholds, tp, fp, recalled = _sweep(result)
    precision = tp / np.maximum(tp + fp, 1)
    recall = recalled / result.n_marks
    return PRCurve(thresholds, precision.astype(float), recall.astype(float), tp, tp + fp, recalled, result.n_marks)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated AP: area under the precision envelope, where
    the envelope at recall r is the best precision at any recall >= r."""
    if len(curve.recall) == 0:
        return 0.0
    if curve.tp is not None:
        return _exact_ap(curve)
    order = np.lexsort((-curve.precision, curve.recall))
    r = curve.recall[order]
    p = curve.precision[order]
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    levels, first = np.unique(r, return_index=True)
    env_at = envelope[first]
    steps = np.diff(np.concatenate(([0.0], levels)))
    return float(np.sum(steps * env_at))


def _exact_ap(curve: PRCurve) -> float:
    # Rational arithmetic, rounded once: no summation error.
    best: dict[int, Fraction] = {}
    for tp, n, k in zip(curve.tp.tolist(), curve.selected.tolist(), curve.recalled.tolist()):
        prec = Fraction(tp, n) if n else Fraction(0)
        if k not in best or prec > best[k]:
            best[k] = prec
    area = Fraction(0)
    env = Fraction(0)
    prev = None
    for k in sorted(best, reverse=True):
        env = max(env, best[k])
        if prev is not None:
            area += Fraction(prev - k, curve.n_marks) * env_prev
        prev, env_prev = k, env
    if prev is not None:
        area += Fraction(prev, curve.n_marks) * env_prev
    return float(area)


def froc_curve(result: MatchResult) -> FROCCurve:
    if result.n_volumes < 1:
        raise InputError("a FROC curve needs at least one volume")
    thresholds, _, fp, recalled = _sweep(result)
    denom = result.n_marks if result.n_marks else 1
    return FROCCurve(thresholds, fp / result.n_volumes, recalled / denom)


def recall_at_fp(curve: FROCCurve, fp_rates: Iterable[float] = FP_RATES) -> list[float]:
    """Recall at requested false-positive rates by linear interpolation,
    clamped to the first and last operating points."""
    fp_rates = list(fp_rates)
    if len(curve.fp_per_volume) == 0:
        return [0.0] * len(fp_rates)
    xs, idx = np.unique(curve.fp_per_volume, return_inverse=True)
    ys = np.full(len(xs), -np.inf)
    np.maximum.at(ys, idx, curve.recall)
    return [float(v) for v in np.interp(fp_rates, xs, ys)]


def recall_at_precision(curve: PRCurve, p: float) -> float:
    ok = curve.precision >= p
    return float(curve.recall[ok].max()) if ok.any() else 0.0


def mean_recall(curve: PRCurve, precisions: Sequence[float] = STANDARD_PRECISIONS) -> float:
    return float(np.mean([recall_at_precision(curve, p) for p in precisions]))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise InputError("pearson needs two equal-length series of at least two values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise InputError("pearson is undefined for a constant series")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))
