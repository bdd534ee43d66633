"""Dense center-point supervision and the hard-negative suppression loss.

Heatmaps live on the output grid ``ceil(H / stride) x ceil(W / stride)``
(row = y, column = x). Positive and hard-negative maps take values in
``[0, 1]``; the master map writes hard negatives as negated peaks, so it
spans ``[-1, 1]``. Fed to the penalty-reduced focal loss, a cell with
``Y = -1`` costs ``2**beta`` times what a plain background cell costs.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError
from .geometry import Box2D

__all__ = [
    "Heatmap",
    "LossConfig",
    "RegressionTargets",
    "focal_loss",
    "focal_loss_cells",
    "focal_loss_grad",
    "gaussian_heatmap",
    "grid_shape",
    "master_heatmap",
    "read_grid",
    "regression_targets",
    "write_grid",
]

EPS = 1e-12
DEFAULT_STRIDE = 4


def grid_shape(width: int, height: int, stride: int) -> tuple[int, int]:
    """Output grid as ``(rows, cols)``."""
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    return math.ceil(height / stride), math.ceil(width / stride)


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray
    stride: int = DEFAULT_STRIDE

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height_out(self) -> int:
        return self.values.shape[0]

    @property
    def width_out(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise InputError("focal exponents must be positive")


def _center_cell(box: Box2D, stride: int) -> tuple[int, int, float, float]:
    cx, cy = box.center
    gx, gy = cx / stride, cy / stride
    ix, iy = int(math.floor(gx)), int(math.floor(gy))
    return ix, iy, gx - ix, gy - iy


def _check_inside(box: Box2D, width: int, height: int) -> None:
    if box.x1 < 0 or box.y1 < 0 or box.x2 > width or box.y2 > height:
        raise InputError(f"box {box.as_tuple()} lies outside the {width}x{height} image")


KERNEL_SIGMAS = 3.0


def gaussian_heatmap(
    boxes: Sequence[Box2D], width: int, height: int, stride: int = DEFAULT_STRIDE
) -> Heatmap:
    """Element-wise max of one axis-aligned Gaussian per box, peaking at
    exactly 1 on the box's quantized center cell.

    ``sigma_x = max(w / (6 * stride), 1)`` and likewise for y, so the box
    edge sits near three standard deviations on the output grid. Each
    kernel is cut to zero beyond 3 sigma on either axis; without the
    window a single hard negative would own every cell of the master map.
    """
    rows, cols = grid_shape(width, height, stride)
    out = np.zeros((rows, cols), dtype=float)
    if not boxes:
        return Heatmap(out, stride)
    ys = np.arange(rows, dtype=float)[:, None]
    xs = np.arange(cols, dtype=float)[None, :]
    for box in boxes:
        _check_inside(box, width, height)
        ix, iy, _, _ = _center_cell(box, stride)
        ix, iy = min(ix, cols - 1), min(iy, rows - 1)
        sx = max(box.width / (6.0 * stride), 1.0)
        sy = max(box.height / (6.0 * stride), 1.0)
        g = np.exp(-((xs - ix) ** 2 / (2 * sx * sx) + (ys - iy) ** 2 / (2 * sy * sy)))
        g[(np.abs(ys - iy) > KERNEL_SIGMAS * sy) | (np.abs(xs - ix) > KERNEL_SIGMAS * sx)] = 0.0
        g[iy, ix] = 1.0
        np.maximum(out, g, out=out)
    return Heatmap(out, stride)


def master_heatmap(yp: Heatmap, yn: Heatmap) -> Heatmap:
    if yp.shape != yn.shape:
        raise InputError(f"heatmap shapes differ: {yp.shape} vs {yn.shape}")
    return Heatmap(np.where(yn.values > 0, -yn.values, yp.values), yp.stride)


def _as_array(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Heatmap) else x, dtype=float)


def _clamped(yhat) -> np.ndarray:
    yhat = _as_array(yhat)
    if np.isnan(yhat).any():
        raise NumericError("predicted heatmap contains NaN")
    return np.clip(yhat, EPS, 1.0 - EPS)


def focal_loss_cells(yhat, y, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-cell terms of the focal loss before the ``-1/m`` normalisation."""
    p = _clamped(yhat)
    y = _as_array(y)
    if p.shape != y.shape:
        raise InputError(f"prediction shape {p.shape} differs from target shape {y.shape}")
    pos = y == 1.0
    pos_term = (1.0 - p) ** cfg.alpha * np.log(p)
    neg_term = (1.0 - y) ** cfg.beta * p**cfg.alpha * np.log(1.0 - p)
    return np.where(pos, pos_term, neg_term)


def focal_loss(yhat, y, cfg: LossConfig = LossConfig(), m: int = 1) -> float:
    """Penalty-reduced focal loss averaged over ``m`` objects.

    Cells with ``Y == 1`` use the positive branch; every other cell,
    including negated hard-negative peaks, uses the background branch.
    """
    if m < 1:
        raise InputError("object count m must be >= 1")
    loss = -float(np.sum(focal_loss_cells(yhat, y, cfg))) / m
    if not math.isfinite(loss):
        raise NumericError(f"focal loss is not finite: {loss}")
    return loss


def focal_loss_grad(yhat, y, cfg: LossConfig = LossConfig(), m: int = 1) -> np.ndarray:
    """Analytic derivative of :func:`focal_loss` with respect to each cell."""
    if m < 1:
        raise InputError("object count m must be >= 1")
    p = _clamped(yhat)
    y = _as_array(y)
    a, b = cfg.alpha, cfg.beta
    d_pos = -a * (1.0 - p) ** (a - 1) * np.log(p) + (1.0 - p) ** a / p
    d_neg = (1.0 - y) ** b * (a * p ** (a - 1) * np.log(1.0 - p) - p**a / (1.0 - p))
    return -np.where(y == 1.0, d_pos, d_neg) / m


@dataclass(frozen=True)
class RegressionTargets:
    size: np.ndarray  # (rows, cols, 2): w, h in input pixels
    offset: np.ndarray  # (rows, cols, 2): sub-cell residual of the true center
    mask: np.ndarray  # (rows, cols) bool


def regression_targets(
    boxes: Sequence[Box2D], width: int, height: int, stride: int = DEFAULT_STRIDE
) -> RegressionTargets:
    rows, cols = grid_shape(width, height, stride)
    size = np.zeros((rows, cols, 2))
    offset = np.zeros((rows, cols, 2))
    mask = np.zeros((rows, cols), dtype=bool)
    for box in boxes:
        _check_inside(box, width, height)
        ix, iy, ox, oy = _center_cell(box, stride)
        if ix >= cols:
            ix, ox = cols - 1, ox + 1.0
        if iy >= rows:
            iy, oy = rows - 1, oy + 1.0
        if mask[iy, ix]:
            warnings.warn(f"two boxes share center cell ({ix}, {iy}); keeping the last", stacklevel=2)
        mask[iy, ix] = True
        size[iy, ix] = (box.width, box.height)
        offset[iy, ix] = (ox, oy)
    return RegressionTargets(size, offset, mask)


# ---------------------------------------------------------------------------
# Flat binary export: row-major little-endian float32 plus a JSON sidecar.
# ---------------------------------------------------------------------------

GRID_SCHEMA = "grid/1.0"


def write_grid(path: str | Path, values: np.ndarray, descriptor: Mapping[str, Any]) -> tuple[Path, Path]:
    path = Path(path)
    arr = np.ascontiguousarray(values, dtype="<f4")
    path.write_bytes(arr.tobytes(order="C"))
    meta = {"schema": GRID_SCHEMA, "shape": list(arr.shape), "dtype": "float32", "byte_order": "little"}
    meta.update(descriptor)
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path, side


def read_grid(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return arr, meta
