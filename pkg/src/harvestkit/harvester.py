"""Iterative harvesting: partition, score, calibrate, pool and mine negatives.

One call to :func:`run_iteration` performs a full round:

1. route fresh proposals to the fully annotated split (M) or the harvest
   split (H, which includes the held-out H_test volumes);
2. split each side into proposals that pseudo-3D match a visible RECIST
   mark and the rest;
3. fuse detector and classifier scores into a lesion score;
4. calibrate the lesion-score threshold on M so that precision reaches the
   target;
5. select prospective positives from the unmatched H proposals and fold
   them into the cumulative pool, keeping one proposal per lesion;
6. reset and reselect hard negatives from what remains.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence

from .errors import InputError, StateError
from .geometry import ORIGINAL, Box2D, Box3D, RecistMark, iou3d, p3d_match
from .tracker3d import Member, Proposal3D

__all__ = [
    "CalibrationWarning",
    "HarvestContext",
    "HarvestParams",
    "HarvestPool",
    "HarvestState",
    "Split",
    "TrainingLabel",
    "TrueFalseSplit",
    "VolumeRecord",
    "calibrate_threshold",
    "check_convergence",
    "export_training_labels",
    "fuse_score",
    "merge_pool",
    "partition_by_split",
    "run_iteration",
    "select_hard_negatives",
    "select_positives",
    "split_true_false",
]

log = logging.getLogger(__name__)

NO_THRESHOLD = math.inf


class CalibrationWarning(UserWarning):
    """No score threshold reaches the requested precision."""


class Split(str, Enum):
    M = "M"
    H = "H"
    H_TEST = "H_test"
    D_TEST = "D_test"


@dataclass(frozen=True)
class VolumeRecord:
    volume_id: str
    n_slices: int
    width: int
    height: int
    split: Split

    def __post_init__(self):
        if self.n_slices < 1:
            raise InputError(f"volume {self.volume_id}: n_slices must be >= 1")
        if self.width < 1 or self.height < 1:
            raise InputError(f"volume {self.volume_id}: image dims must be positive")
        object.__setattr__(self, "split", Split(self.split))


@dataclass(frozen=True)
class HarvestParams:
    p3d_iou: float = 0.5
    same_lesion_iou3d: float = 0.3
    target_precision: float = 0.95
    hard_neg_min_sg: float = 0.5
    hard_neg_cap: int = 5
    convergence_window: int = 2
    convergence_epsilon: float = 0.005

    def __post_init__(self):
        for name in ("p3d_iou", "same_lesion_iou3d", "target_precision", "hard_neg_min_sg"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {v}")
        if self.hard_neg_cap < 0:
            raise InputError("hard_neg_cap must be non-negative")
        if self.convergence_window < 1 or self.convergence_epsilon < 0:
            raise InputError("convergence window must be >= 1 and epsilon >= 0")


# ---------------------------------------------------------------------------
# Set algebra
# ---------------------------------------------------------------------------


def _volume_index(volumes: Iterable[VolumeRecord]) -> dict[str, VolumeRecord]:
    return {v.volume_id: v for v in volumes}


def partition_by_split(
    proposals: Sequence[Proposal3D], volumes: Iterable[VolumeRecord] | Mapping[str, VolumeRecord]
) -> tuple[list[Proposal3D], list[Proposal3D]]:
    """Route proposals to ``(P_M, P_H)`` by the split of their volume.

    H_test volumes travel with H (use :func:`held_out_volumes` to tell them
    apart); D_test volumes never take part in harvesting and are dropped.
    """
    index = volumes if isinstance(volumes, Mapping) else _volume_index(volumes)
    p_m: list[Proposal3D] = []
    p_h: list[Proposal3D] = []
    for p in proposals:
        vol = index.get(p.volume_id)
        if vol is None:
            raise InputError(f"proposal {p.id} refers to unknown volume {p.volume_id!r}")
        if vol.split is Split.M:
            p_m.append(p)
        elif vol.split in (Split.H, Split.H_TEST):
            p_h.append(p)
    return p_m, p_h


def held_out_volumes(volumes: Iterable[VolumeRecord]) -> set[str]:
    return {v.volume_id for v in volumes if v.split is Split.H_TEST}


class TrueFalseSplit(NamedTuple):
    matched: list[Proposal3D]
    unmatched: list[Proposal3D]
    matches: dict[str, list[tuple[str, str]]]


def _marks_by_volume(marks: Iterable[RecistMark]) -> dict[str, list[RecistMark]]:
    out: dict[str, list[RecistMark]] = defaultdict(list)
    for m in marks:
        out[m.volume_id].append(m)
    return out


def split_true_false(
    proposals: Sequence[Proposal3D], marks: Iterable[RecistMark], iou_thresh: float = 0.5
) -> TrueFalseSplit:
    """Divide proposals into those that pseudo-3D match some mark and the rest.

    ``matches`` maps proposal id to the keys of every mark it matches; one
    mark may be claimed by several proposals.
    """
    by_vol = _marks_by_volume(marks)
    matched, unmatched = [], []
    matches: dict[str, list[tuple[str, str]]] = {}
    for p in proposals:
        hits = [m.key for m in by_vol.get(p.volume_id, ()) if p3d_match(p.extent, m, iou_thresh)]
        if hits:
            matched.append(p)
            matches[p.id] = hits
        else:
            unmatched.append(p)
    return TrueFalseSplit(matched, unmatched, matches)


def fuse_score(s_g: float, s_c: float) -> float:
    """Lesion score under independence of detector and classifier."""
    return s_g * s_c


def with_scores(p: Proposal3D, s_c: float) -> Proposal3D:
    return replace(p, s_c=s_c, s=fuse_score(p.s_g, s_c))


# ---------------------------------------------------------------------------
# Calibration and selection
# ---------------------------------------------------------------------------


def calibrate_threshold(scored: Sequence[tuple[float, bool]], target_precision: float = 0.95) -> float:
    """Smallest observed score whose selection ``{s >= tau}`` meets the
    target precision. Returns ``math.inf`` (select nothing) with a
    :class:`CalibrationWarning` when no score qualifies.
    """
    if not scored:
        raise InputError("calibrate_threshold needs at least one scored item")
    ordered = sorted(scored, key=lambda item: -item[0])
    best = NO_THRESHOLD
    tp = n = 0
    i = 0
    while i < len(ordered):
        s = ordered[i][0]
        while i < len(ordered) and ordered[i][0] == s:
            tp += bool(ordered[i][1])
            n += 1
            i += 1
        if tp / n >= target_precision:
            best = s
    if best == NO_THRESHOLD:
        warnings.warn(
            f"no threshold reaches precision {target_precision}; selecting nothing",
            CalibrationWarning,
            stacklevel=2,
        )
    return best


def select_positives(proposals: Sequence[Proposal3D], tau: float) -> list[Proposal3D]:
    out = []
    for p in proposals:
        if p.s_c is None or p.s is None:
            raise StateError(f"proposal {p.id} has no classifier score")
        if p.s >= tau:
            out.append(p)
    return out


def select_hard_negatives(
    proposals: Sequence[Proposal3D], min_sg: float = 0.5, per_volume_cap: int = 5
) -> list[Proposal3D]:
    """Per volume, the ``per_volume_cap`` most confident detections with
    ``s_g >= min_sg``."""
    by_vol: dict[str, list[Proposal3D]] = defaultdict(list)
    for p in proposals:
        if p.s_g >= min_sg:
            by_vol[p.volume_id].append(p)
    out = []
    for vid in sorted(by_vol):
        ranked = sorted(by_vol[vid], key=lambda p: (-p.s_g, p.sort_key()))
        out.extend(ranked[:per_volume_cap])
    return out


# ---------------------------------------------------------------------------
# Pool
# ---------------------------------------------------------------------------


def _winner_key(p: Proposal3D):
    return (-p.s_g, -(p.s if p.s is not None else -1.0), p.sort_key())


@dataclass(frozen=True)
class HarvestPool:
    """Cumulative proposal pool with one surviving proposal per lesion.

    ``entries`` remembers every proposal ever merged (deduplicated by id).
    The visible pool, :attr:`proposals`, clusters entries of each volume by
    the same-lesion relation ``iou3d >= same_lesion_iou3d`` (transitively)
    and keeps the most confident proposal of every cluster. Because the
    view is a function of the entry set alone, merging is idempotent and
    independent of the order in which batches arrive.
    """

    entries: tuple[Proposal3D, ...] = ()
    same_lesion_iou3d: float = 0.3

    @property
    def proposals(self) -> list[Proposal3D]:
        by_vol: dict[str, list[Proposal3D]] = defaultdict(list)
        for p in self.entries:
            by_vol[p.volume_id].append(p)
        winners = []
        for vid in sorted(by_vol):
            winners.extend(_cluster_winners(by_vol[vid], self.same_lesion_iou3d))
        winners.sort(key=Proposal3D.sort_key)
        return winners

    def __len__(self) -> int:
        return len(self.proposals)


def _cluster_winners(props: list[Proposal3D], thresh: float) -> list[Proposal3D]:
    n = len(props)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if iou3d(props[i].extent, props[j].extent) >= thresh:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    best: dict[int, Proposal3D] = {}
    for i, p in enumerate(props):
        r = find(i)
        if r not in best or _winner_key(p) < _winner_key(best[r]):
            best[r] = p
    return list(best.values())


def merge_pool(
    pool: HarvestPool | Sequence[Proposal3D],
    additions: Sequence[Proposal3D],
    same_lesion_iou3d: Optional[float] = None,
) -> HarvestPool:
    if not isinstance(pool, HarvestPool):
        pool = HarvestPool(tuple(pool), same_lesion_iou3d if same_lesion_iou3d is not None else 0.3)
    thresh = same_lesion_iou3d if same_lesion_iou3d is not None else pool.same_lesion_iou3d
    seen: dict[str, Proposal3D] = {}
    for p in (*pool.entries, *additions):
        prev = seen.get(p.id)
        if prev is not None and prev != p:
            raise InputError(f"two different proposals share id {p.id!r}")
        seen[p.id] = p
    entries = tuple(sorted(seen.values(), key=Proposal3D.sort_key))
    return HarvestPool(entries, thresh)


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HarvestContext:
    """Everything a round needs besides the fresh proposals.

    ``marks`` may hold every mark available; a round only looks at the
    complete set on M volumes and at original marks elsewhere.
    ``eval_marks`` (complete marks of held-out volumes) drive the
    mean-recall monitor when present.
    """

    volumes: Mapping[str, VolumeRecord]
    marks: tuple[RecistMark, ...]
    params: HarvestParams = HarvestParams()
    eval_marks: tuple[RecistMark, ...] = ()

    @classmethod
    def build(cls, volumes, marks, params=None, eval_marks=()):
        index = _volume_index(volumes) if not isinstance(volumes, Mapping) else dict(volumes)
        return cls(index, tuple(marks), params or HarvestParams(), tuple(eval_marks))

    def visible_marks(self, splits: Iterable[Split]) -> list[RecistMark]:
        splits = set(splits)
        out = []
        for m in self.marks:
            vol = self.volumes.get(m.volume_id)
            if vol is None or vol.split not in splits:
                continue
            if vol.split is Split.M or m.origin == ORIGINAL:
                out.append(m)
        return out


@dataclass(frozen=True)
class HarvestState:
    k: int = 1
    m_true: tuple[Proposal3D, ...] = ()
    m_false: tuple[Proposal3D, ...] = ()
    h_true: HarvestPool = HarvestPool()
    pool: HarvestPool = HarvestPool()
    additions: tuple[Proposal3D, ...] = ()
    hard_negatives: tuple[Proposal3D, ...] = ()
    tau: float = NO_THRESHOLD
    tau_history: tuple[float, ...] = ()
    recall_history: tuple[float, ...] = ()

    @classmethod
    def initial(cls, params: HarvestParams = HarvestParams()) -> HarvestState:
        return cls(
            h_true=HarvestPool((), params.same_lesion_iou3d),
            pool=HarvestPool((), params.same_lesion_iou3d),
        )


def _overlaps_any(p: Proposal3D, others: Sequence[Proposal3D], thresh: float) -> bool:
    return any(o.volume_id == p.volume_id and iou3d(p.extent, o.extent) >= thresh for o in others)


def run_iteration(
    state: HarvestState,
    proposals: Sequence[Proposal3D],
    context: HarvestContext,
    classify: Optional[Callable[[Proposal3D], float]] = None,
) -> HarvestState:
    """Execute one harvesting round and return the next state.

    Classifier scores come either inline (``s_c`` already set on every
    proposal) or from ``classify``.
    """
    params = context.params
    p_m, p_h = partition_by_split(proposals, context.volumes)
    if classify is not None:
        p_m = [with_scores(p, classify(p)) for p in p_m]
        p_h = [with_scores(p, classify(p)) for p in p_h]
    else:
        p_m = [_ensure_fused(p) for p in p_m]
        p_h = [_ensure_fused(p) for p in p_h]

    r_m = context.visible_marks([Split.M])
    r_h = context.visible_marks([Split.H, Split.H_TEST])
    m_split = split_true_false(p_m, r_m, params.p3d_iou)
    h_split = split_true_false(p_h, r_h, params.p3d_iou)

    tau = state.tau
    if p_m:
        matched_ids = {p.id for p in m_split.matched}
        tau = calibrate_threshold([(p.s, p.id in matched_ids) for p in p_m], params.target_precision)

    new_pos = select_positives(h_split.unmatched, tau)
    pool = merge_pool(state.pool, new_pos)
    h_true = merge_pool(state.h_true, h_split.matched)

    new_ids = {p.id for p in new_pos}
    keep_out = pool.proposals + h_true.proposals
    h_rest = [
        p
        for p in h_split.unmatched
        if p.id not in new_ids and not _overlaps_any(p, keep_out, params.same_lesion_iou3d)
    ]
    m_rest = [p for p in m_split.unmatched if not _overlaps_any(p, m_split.matched, params.same_lesion_iou3d)]
    hard = select_hard_negatives(h_rest + m_rest, params.hard_neg_min_sg, params.hard_neg_cap)

    nxt = HarvestState(
        k=state.k + 1,
        m_true=tuple(m_split.matched),
        m_false=tuple(m_split.unmatched),
        h_true=h_true,
        pool=pool,
        additions=tuple(new_pos),
        hard_negatives=tuple(hard),
        tau=tau,
        tau_history=state.tau_history + (tau,),
        recall_history=state.recall_history,
    )
    if context.eval_marks:
        from .metrics import mean_recall, pr_curve

        curve = pr_curve(evaluate_label_set(nxt, context))
        nxt = replace(nxt, recall_history=state.recall_history + (mean_recall(curve),))
    log.info(
        "round %d: |P_M|=%d |P_H|=%d tau=%.4g +%d positives, pool=%d, %d hard negatives",
        state.k, len(p_m), len(p_h), tau, len(new_pos), len(pool.proposals), len(hard),
    )
    return nxt


def _ensure_fused(p: Proposal3D) -> Proposal3D:
    if p.s_c is None:
        raise StateError(f"proposal {p.id} has no classifier score and no classifier was supplied")
    return p if p.s is not None else with_scores(p, p.s_c)


def label_set(
    state: HarvestState, context: HarvestContext, volume_ids: Optional[set[str]] = None
) -> list[Proposal3D]:
    """The harvested label set as scored proposals.

    Original marks and mark-matched proposals are certain (score 1); pooled
    positives carry their lesion score. Restricted to ``volume_ids`` (the
    held-out volumes by default).
    """
    if volume_ids is None:
        volume_ids = held_out_volumes(context.volumes.values())
    out = []
    for m in context.visible_marks([Split.H, Split.H_TEST]):
        if m.volume_id in volume_ids:
            out.append(mark_as_proposal(m))
    for p in state.h_true.proposals:
        if p.volume_id in volume_ids:
            out.append(replace(p, s=1.0))
    for p in state.pool.proposals:
        if p.volume_id in volume_ids:
            out.append(p)
    return out


def mark_as_proposal(m: RecistMark, score: float = 1.0) -> Proposal3D:
    return Proposal3D(
        id=f"{m.volume_id}/mark/{m.lesion_id}",
        volume_id=m.volume_id,
        extent=Box3D.from_xy(m.box, m.z, m.z),
        members=(Member(m.z, m.box, score),),
        s_g=score,
        s_c=1.0,
        s=score,
    )


def evaluate_label_set(state: HarvestState, context: HarvestContext, volume_ids=None):
    """Match the label set of ``volume_ids`` against ``context.eval_marks``."""
    from .metrics import match_all

    if volume_ids is None:
        volume_ids = held_out_volumes(context.volumes.values())
    marks = [m for m in context.eval_marks if m.volume_id in volume_ids]
    return match_all(
        label_set(state, context, volume_ids),
        marks,
        mode="p3d",
        n_volumes=len(volume_ids),
        iou_thresh=context.params.p3d_iou,
    )


def check_convergence(history: Sequence[float], window: int = 2, epsilon: float = 0.005) -> bool:
    """True once each of the last ``window`` round-over-round gains is
    below ``epsilon``."""
    if len(history) < window + 1:
        return False
    tail = history[-(window + 1):]
    return all(b - a < epsilon for a, b in zip(tail, tail[1:]))


# ---------------------------------------------------------------------------
# Training-label export
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingLabel:
    volume_id: str
    z: int
    box: Box2D
    positive: bool
    source: str
    score: float = 1.0
    extra: dict = field(default_factory=dict, hash=False, repr=False)


def export_training_labels(
    state: HarvestState,
    marks: Iterable[RecistMark],
    volumes: Iterable[VolumeRecord] | Mapping[str, VolumeRecord],
) -> list[TrainingLabel]:
    """One 2D box per matched or pooled proposal (its best-scoring slice),
    every RECIST box of a training volume, and one negative box per hard
    negative. Held-out and detector-test volumes are skipped."""
    index = volumes if isinstance(volumes, Mapping) else _volume_index(volumes)
    trainable = {vid for vid, v in index.items() if v.split in (Split.M, Split.H)}
    labels: list[TrainingLabel] = []
    for m in marks:
        if m.volume_id in trainable and (index[m.volume_id].split is Split.M or m.origin == ORIGINAL):
            labels.append(TrainingLabel(m.volume_id, m.z, m.box, True, "recist"))

    def best_slice(p: Proposal3D, positive: bool, source: str) -> TrainingLabel:
        b = p.best_member
        return TrainingLabel(p.volume_id, b.z, b.box, positive, source, b.score)

    for p in (*state.m_true, *state.h_true.proposals):
        if p.volume_id in trainable:
            labels.append(best_slice(p, True, "matched"))
    for p in state.pool.proposals:
        if p.volume_id in trainable:
            labels.append(best_slice(p, True, "harvested"))
    for p in state.hard_negatives:
        if p.volume_id in trainable:
            labels.append(best_slice(p, False, "hard_negative"))
    labels.sort(key=lambda l: (l.volume_id, l.z, not l.positive, l.source, l.box.as_tuple()))
    return labels
