"""Stack per-slice 2D detections of one volume into 3D proposals.

Detections above the score floor are associated slice by slice to open
tracks (IoU against a Kalman-smoothed prediction of each track's box),
then tracks separated by at most one missing slice are bridged and fused
when their facing boxes overlap strongly enough.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import InputError
from .geometry import Box2D, Box3D, iou2d

__all__ = [
    "Detection2D",
    "KalmanConfig",
    "KalmanState",
    "Member",
    "Proposal3D",
    "Track",
    "bridge_and_fuse",
    "kalman_init",
    "kalman_predict",
    "kalman_predict_update",
    "kalman_update",
    "stack_detections",
    "stack_volume",
]

DEFAULT_T_G = 0.1
DEFAULT_STACK_IOU = 0.8


class Member(NamedTuple):
    z: int
    box: Box2D
    score: float


@dataclass(frozen=True)
class Detection2D:
    volume_id: str
    z: int
    box: Box2D
    score: float
    extra: dict[str, Any] = field(default_factory=dict, hash=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"detection score must lie in [0, 1], got {self.score}")
        if int(self.z) != self.z or self.z < 0:
            raise InputError(f"slice index must be a non-negative integer, got {self.z}")

    def sort_key(self):
        return (self.z, self.box.x1, self.box.y1, self.box.x2, self.box.y2, self.score)


@dataclass(frozen=True)
class Proposal3D:
    """A 3D lesion proposal.

    ``s_g`` is the detector score (max over members), ``s_c`` the optional
    classifier probability and ``s`` the fused lesion score. ``round`` is
    the harvesting iteration that produced it.
    """

    id: str
    volume_id: str
    extent: Box3D
    members: tuple[Member, ...]
    s_g: float
    s_c: Optional[float] = None
    s: Optional[float] = None
    round: int = 0
    extra: dict[str, Any] = field(default_factory=dict, hash=False, repr=False)

    def __post_init__(self):
        for name in ("s_g", "s_c", "s"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError(f"proposal {self.id}: {name} must lie in [0, 1], got {v}")

    @classmethod
    def from_members(cls, id: str, volume_id: str, members: Iterable[Member], round: int = 0) -> Proposal3D:
        members = tuple(sorted(members, key=lambda m: m.z))
        if not members:
            raise InputError("a proposal needs at least one member box")
        xy = Box2D.enclosing(m.box for m in members)
        extent = Box3D.from_xy(xy, members[0].z, members[-1].z)
        return cls(id, volume_id, extent, members, max(m.score for m in members), round=round)

    @property
    def best_member(self) -> Member:
        """Member slice with the highest detection score (earliest slice on ties)."""
        return max(self.members, key=lambda m: (m.score, -m.z))

    def sort_key(self):
        e = self.extent
        return (self.volume_id, e.z1, e.x1, e.y1, e.z2, e.x2, e.y2, -self.s_g, self.id)


# ---------------------------------------------------------------------------
# Kalman filter over (cx, cy, w, h) with a constant-position model.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KalmanConfig:
    process_noise: float = 0.25
    observation_noise: float = 4.0
    enabled: bool = True

    def __post_init__(self):
        if self.process_noise < 0 or self.observation_noise < 0:
            raise InputError("Kalman noise variances must be non-negative")


@dataclass(frozen=True)
class KalmanState:
    mean: tuple[float, float, float, float]
    var: tuple[float, float, float, float]

    @property
    def box(self) -> Box2D:
        cx, cy, w, h = self.mean
        return Box2D(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _box_to_z(box: Box2D) -> np.ndarray:
    cx, cy = box.center
    return np.array([cx, cy, box.width, box.height], dtype=float)


def kalman_init(box: Box2D, observation_noise: float = 1.0) -> KalmanState:
    z = _box_to_z(box)
    return KalmanState(tuple(z.tolist()), (float(observation_noise),) * 4)


def kalman_predict(state: KalmanState, process_noise: float = 1.0) -> KalmanState:
    # Identity dynamics: only the uncertainty grows.
    return KalmanState(state.mean, tuple(float(v + process_noise) for v in state.var))


def kalman_update(state: KalmanState, observation: Box2D, observation_noise: float = 1.0) -> KalmanState:
    x = np.array(state.mean, dtype=float)
    p = np.array(state.var, dtype=float)
    denom = p + observation_noise
    gain = np.divide(p, denom, out=np.ones_like(p), where=denom > 0)
    x = x + gain * (_box_to_z(observation) - x)
    p = (1.0 - gain) * p
    return KalmanState(tuple(x.tolist()), tuple(p.tolist()))


def kalman_predict_update(
    state: KalmanState, observation: Box2D, process_noise: float = 1.0, observation_noise: float = 1.0
) -> KalmanState:
    return kalman_update(kalman_predict(state, process_noise), observation, observation_noise)


# ---------------------------------------------------------------------------
# Tracks and stacking
# ---------------------------------------------------------------------------


@dataclass
class Track:
    id: int
    volume_id: str
    members: list[Member]
    kalman: Optional[KalmanState] = None

    @property
    def last_z(self) -> int:
        return self.members[-1].z

    def predicted_box(self, cfg: KalmanConfig) -> Box2D:
        if not cfg.enabled or self.kalman is None:
            return self.members[-1].box
        return kalman_predict(self.kalman, cfg.process_noise).box

    def extend(self, member: Member, cfg: KalmanConfig) -> None:
        self.members.append(member)
        if cfg.enabled and self.kalman is not None:
            self.kalman = kalman_predict_update(
                self.kalman, member.box, cfg.process_noise, cfg.observation_noise
            )


def _open_track(track_id: int, det: Detection2D, cfg: KalmanConfig) -> Track:
    kf = kalman_init(det.box, cfg.observation_noise) if cfg.enabled else None
    return Track(track_id, det.volume_id, [Member(det.z, det.box, det.score)], kf)


def stack_volume(
    dets: Sequence[Detection2D],
    t_G: float = DEFAULT_T_G,
    stack_iou: float = DEFAULT_STACK_IOU,
    kalman: Optional[KalmanConfig] = None,
    round: int = 0,
) -> list[Proposal3D]:
    """Turn one volume's 2D detections into 3D proposals.

    Detections with ``score <= t_G`` are dropped. Slices are swept in
    ascending order; on each slice detections are matched greedily to the
    tracks that were extended on the previous slice (highest IoU first, ties
    broken by higher detection score, then lower track id) when the IoU
    with the track's predicted box reaches ``stack_iou``. Unmatched
    detections open new tracks and unmatched tracks close. The result is
    passed through :func:`bridge_and_fuse`.
    """
    cfg = kalman if kalman is not None else KalmanConfig()
    if not dets:
        return []
    volume_ids = {d.volume_id for d in dets}
    if len(volume_ids) > 1:
        raise InputError(f"stack_volume expects a single volume, got {sorted(volume_ids)}")

    kept = sorted((d for d in dets if d.score > t_G), key=Detection2D.sort_key)
    by_slice: dict[int, list[Detection2D]] = defaultdict(list)
    for d in kept:
        by_slice[d.z].append(d)

    tracks: list[Track] = []
    active: list[Track] = []
    for z in sorted(by_slice):
        slice_dets = by_slice[z]
        candidates = [t for t in active if t.last_z == z - 1]
        pairs = []
        for t in candidates:
            pred = t.predicted_box(cfg)
            for di, d in enumerate(slice_dets):
                ov = iou2d(d.box, pred)
                if ov >= stack_iou:
                    pairs.append((-ov, -d.score, t.id, di))
        pairs.sort()
        taken_tracks: set[int] = set()
        taken_dets: set[int] = set()
        by_id = {t.id: t for t in candidates}
        for _, _, tid, di in pairs:
            if tid in taken_tracks or di in taken_dets:
                continue
            taken_tracks.add(tid)
            taken_dets.add(di)
            d = slice_dets[di]
            by_id[tid].extend(Member(d.z, d.box, d.score), cfg)
        next_active = [by_id[tid] for tid in sorted(taken_tracks)]
        for di, d in enumerate(slice_dets):
            if di not in taken_dets:
                t = _open_track(len(tracks), d, cfg)
                tracks.append(t)
                next_active.append(t)
        active = next_active

    return bridge_and_fuse(tracks, stack_iou=stack_iou, round=round)


def _fusable(a: Sequence[Member], b: Sequence[Member], stack_iou: float) -> bool:
    """``a`` ends before ``b`` starts; their one-slice-padded extents touch
    and the boxes facing the gap overlap by at least ``stack_iou``."""
    gap = b[0].z - a[-1].z - 1
    if gap < 0 or gap > 1:
        return False
    return iou2d(a[-1].box, b[0].box) >= stack_iou


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def bridge_and_fuse(
    tracks: Sequence[Track | Proposal3D],
    stack_iou: float = DEFAULT_STACK_IOU,
    round: Optional[int] = None,
) -> list[Proposal3D]:
    """Fuse tracks whose one-slice-padded extents meet.

    Two tracks are fused (transitively) when one ends at most one slice
    before the other begins and the facing member boxes have IoU at least
    ``stack_iou``. A fused proposal spans the bridged gap slice without a
    member box there. Proposals may be passed back in; fusing is idempotent.
    Output ids are ``<volume>/r<round>/p<index>`` in canonical order.
    """
    if not tracks:
        return []
    volume_ids = {t.volume_id for t in tracks}
    if len(volume_ids) > 1:
        raise InputError(f"bridge_and_fuse expects a single volume, got {sorted(volume_ids)}")
    (volume_id,) = volume_ids
    if round is None:
        round = max((getattr(t, "round", 0) for t in tracks), default=0)

    member_lists = [sorted(t.members, key=lambda m: m.z) for t in tracks]
    n = len(member_lists)
    parent = list(range(n))
    starts: dict[int, list[int]] = defaultdict(list)
    for i, ms in enumerate(member_lists):
        starts[ms[0].z].append(i)
    for i, ms in enumerate(member_lists):
        end = ms[-1].z
        for z in (end + 1, end + 2):
            for j in starts.get(z, ()):
                if _fusable(ms, member_lists[j], stack_iou):
                    ri, rj = _find(parent, i), _find(parent, j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, dict[int, Member]] = defaultdict(dict)
    for i, ms in enumerate(member_lists):
        slot = groups[_find(parent, i)]
        for m in ms:
            cur = slot.get(m.z)
            # Colliding slices keep the stronger box.
            if cur is None or (m.score, _neg_box(m.box)) > (cur.score, _neg_box(cur.box)):
                slot[m.z] = m

    proposals = [
        Proposal3D.from_members("", volume_id, group.values(), round=round) for group in groups.values()
    ]
    proposals.sort(key=Proposal3D.sort_key)
    return [_with_id(p, f"{volume_id}/r{round}/p{i}") for i, p in enumerate(proposals)]


def _neg_box(b: Box2D) -> tuple[float, ...]:
    return (-b.x1, -b.y1, -b.x2, -b.y2)


def _with_id(p: Proposal3D, new_id: str) -> Proposal3D:
    return Proposal3D(new_id, p.volume_id, p.extent, p.members, p.s_g, p.s_c, p.s, p.round, p.extra)


def stack_detections(
    dets: Iterable[Detection2D],
    t_G: float = DEFAULT_T_G,
    stack_iou: float = DEFAULT_STACK_IOU,
    kalman: Optional[KalmanConfig] = None,
    round: int = 0,
) -> list[Proposal3D]:
    """Run :func:`stack_volume` independently on every volume present."""
    per_volume: dict[str, list[Detection2D]] = defaultdict(list)
    for d in dets:
        per_volume[d.volume_id].append(d)
    out: list[Proposal3D] = []
    for vid in sorted(per_volume):
        out.extend(stack_volume(per_volume[vid], t_G=t_G, stack_iou=stack_iou, kalman=kalman, round=round))
    return out

