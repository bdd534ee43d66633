"""Axis-aligned box algebra.

Boxes are half-open in x/y, ``[x1, x2) x [y1, y2)`` with area
``(x2 - x1) * (y2 - y1)``, and inclusive in z: a 3D box spans the integer
slices ``z1..z2`` so its depth is ``z2 - z1 + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .errors import DegenerateMarkError, InputError

__all__ = [
    "Box2D",
    "Box3D",
    "RecistMark",
    "box_from_recist",
    "iou2d",
    "iou3d",
    "p3d_match",
]

ORIGINAL = "original"
SUPPLEMENTARY = "supplementary"


@dataclass(frozen=True, order=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InputError(f"box coordinates must be finite, got {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"box must have positive area, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translate(self, dx: float, dy: float) -> Box2D:
        return Box2D(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def enclosing(cls, boxes: Iterable[Box2D]) -> Box2D:
        """Tight bounding box of one or more boxes."""
        boxes = list(boxes)
        if not boxes:
            raise InputError("cannot enclose an empty set of boxes")
        return cls(
            min(b.x1 for b in boxes),
            min(b.y1 for b in boxes),
            max(b.x2 for b in boxes),
            max(b.y2 for b in boxes),
        )


@dataclass(frozen=True, order=True)
class Box3D:
    x1: float
    y1: float
    x2: float
    y2: float
    z1: int
    z2: int

    def __post_init__(self):
        # Box2D validation covers the xy extent.
        Box2D(self.x1, self.y1, self.x2, self.y2)
        if int(self.z1) != self.z1 or int(self.z2) != self.z2:
            raise InputError(f"slice indices must be integers, got z1={self.z1}, z2={self.z2}")
        if self.z2 < self.z1:
            raise InputError(f"z2 must be >= z1, got z1={self.z1}, z2={self.z2}")

    @classmethod
    def from_xy(cls, box: Box2D, z1: int, z2: int) -> Box3D:
        return cls(box.x1, box.y1, box.x2, box.y2, z1, z2)

    @property
    def xy(self) -> Box2D:
        return Box2D(self.x1, self.y1, self.x2, self.y2)

    @property
    def depth(self) -> int:
        return self.z2 - self.z1 + 1

    @property
    def volume(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1) * self.depth

    def contains_slice(self, z: int) -> bool:
        return self.z1 <= z <= self.z2


@dataclass(frozen=True)
class RecistMark:
    """A 2D ground-truth box pinned to one slice of one volume.

    ``origin`` is ``"original"`` for marks that shipped with the dataset and
    ``"supplementary"`` for the extra manual annotations that complete the
    fully labelled subset.
    """

    volume_id: str
    lesion_id: str
    z: int
    box: Box2D
    origin: str = ORIGINAL
    extra: dict[str, Any] = field(default_factory=dict, hash=False, repr=False)

    def __post_init__(self):
        if self.origin not in (ORIGINAL, SUPPLEMENTARY):
            raise InputError(f"mark origin must be 'original' or 'supplementary', got {self.origin!r}")
        if int(self.z) != self.z:
            raise InputError(f"mark slice must be an integer, got {self.z}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.volume_id, self.lesion_id)


def _overlap(a1: float, a2: float, b1: float, b2: float) -> float:
    return max(0.0, min(a2, b2) - max(a1, b1))


def iou2d(a: Box2D, b: Box2D) -> float:
    iw = _overlap(a.x1, a.x2, b.x1, b.x2)
    ih = _overlap(a.y1, a.y2, b.y1, b.y2)
    inter = iw * ih
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU with xy in pixels and depth in whole slices.

    No voxel-spacing correction is applied: every slice weighs the same.
    """
    iw = _overlap(a.x1, a.x2, b.x1, b.x2)
    ih = _overlap(a.y1, a.y2, b.y1, b.y2)
    idepth = max(0, min(a.z2, b.z2) - max(a.z1, b.z1) + 1)
    inter = iw * ih * idepth
    if inter <= 0.0:
        return 0.0
    return inter / (a.volume + b.volume - inter)


def p3d_match(p: Box3D, mark: RecistMark, iou_thresh: float = 0.5) -> bool:
    """Pseudo-3D match: the mark's slice lies inside ``p`` and the 2D IoU
    of ``p``'s xy extent with the mark box reaches ``iou_thresh``.

    Volume identity is the caller's concern.
    """
    if not p.z1 <= mark.z <= p.z2:
        return False
    return iou2d(p.xy, mark.box) >= iou_thresh


def box_from_recist(endpoints: Sequence[Sequence[float]]) -> Box2D:
    """Tight box around RECIST diameter endpoints.

    ``endpoints`` is a flat sequence of ``(x, y)`` points, normally the four
    ends of the long and short axis. Nested segment pairs
    ``((p, q), (r, s))`` are flattened too.
    """
    points: list[tuple[float, float]] = []
    for item in endpoints:
        if len(item) == 2 and all(isinstance(v, (int, float)) for v in item):
            points.append((float(item[0]), float(item[1])))
        else:
            for pt in item:
                points.append((float(pt[0]), float(pt[1])))
    if len(set(points)) < 2:
        raise DegenerateMarkError(f"RECIST mark needs at least two distinct points, got {points}")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x1, x2, y1, y2 = min(xs), max(xs), min(ys), max(ys)
    if x2 <= x1 or y2 <= y1:
        raise DegenerateMarkError(
            f"RECIST mark has zero extent: x in [{x1}, {x2}], y in [{y1}, {y2}]"
        )
    return Box2D(x1, y1, x2, y2)
