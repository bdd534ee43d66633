"""Seeded synthetic world with stand-in detector and classifier oracles.

Every random draw comes from a generator keyed by ``(seed, stream, ...)``
through :class:`numpy.random.SeedSequence` spawn keys, so a volume or slice
produces the same draws no matter which order (or which process) computes
it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InputError
from .geometry import ORIGINAL, SUPPLEMENTARY, Box2D, Box3D, RecistMark, p3d_match
from .harvester import (
    HarvestContext,
    HarvestParams,
    HarvestState,
    Split,
    TrainingLabel,
    VolumeRecord,
    check_convergence,
    evaluate_label_set,
    export_training_labels,
    run_iteration,
)
from .metrics import GroundTruth3D, froc_curve, match_all, pearson, recall_at_fp
from .report import Report, build_report
from .tracker3d import DEFAULT_STACK_IOU, DEFAULT_T_G, Detection2D, KalmanConfig, Proposal3D, stack_detections

__all__ = [
    "ConcordanceResult",
    "OracleSkill",
    "SimulationResult",
    "World",
    "WorldConfig",
    "concordance_experiment",
    "default_skill_levels",
    "generate_world",
    "oracle_lpc",
    "oracle_lpg",
    "run_simulation",
    "update_skill",
]

# stream tags for keyed generators
_WORLD, _SPLIT, _LPG, _LPC, _CONCORDANCE = 1, 2, 3, 4, 5

_TRUE_SCORE = (0.75, 0.15)
_SPURIOUS_SCORE = (0.35, 0.15)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class WorldConfig:
    n_volumes: int = 200
    n_slices: int = 40
    width: int = 256
    height: int = 256
    lesions_mean: float = 3.0
    lesions_max: int = 8
    marked_fraction: float = 0.5
    size_min: int = 12
    size_max: int = 48
    depth_min: int = 3
    depth_max: int = 12
    m_fraction: float = 0.2
    h_test_fraction: float = 0.25
    d_test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_volumes", "n_slices", "width", "height", "lesions_max", "size_min", "depth_min"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.lesions_mean < 1:
            raise InputError("lesions_mean must be >= 1")
        for name in ("marked_fraction", "m_fraction", "h_test_fraction", "d_test_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if self.m_fraction + self.h_test_fraction + self.d_test_fraction > 1.0:
            raise InputError("split fractions sum past 1")
        if self.size_max < self.size_min or self.depth_max < self.depth_min:
            raise InputError("size/depth ranges are inverted")


@dataclass(frozen=True)
class OracleSkill:
    detect_base: float = 0.7
    fp_rate: float = 0.4
    jitter: float = 0.04
    clf_auc: float = 0.9
    gain_pos: float = 0.2
    gain_neg: float = 0.5
    true_score_mean: float = _TRUE_SCORE[0]
    true_score_sd: float = _TRUE_SCORE[1]

    @classmethod
    def perfect(cls) -> OracleSkill:
        """Finds every lesion slice exactly, with full confidence, and nothing else."""
        return cls(detect_base=1.0, fp_rate=0.0, jitter=0.0, clf_auc=1.0, true_score_mean=1.0, true_score_sd=0.0)

    def __post_init__(self):
        for name in ("detect_base", "clf_auc", "true_score_mean"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        for name in ("fp_rate", "jitter", "gain_pos", "gain_neg", "true_score_sd"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")


@dataclass(frozen=True)
class World:
    config: WorldConfig
    volumes: tuple[VolumeRecord, ...]
    lesions: tuple[GroundTruth3D, ...]
    marks: tuple[RecistMark, ...]  # one key-slice mark per lesion

    @property
    def original_marks(self) -> list[RecistMark]:
        return [m for m in self.marks if m.origin == ORIGINAL]

    def volume_ids(self, *splits: Split) -> set[str]:
        return {v.volume_id for v in self.volumes if v.split in splits}

    def marks_in(self, volume_ids: set[str]) -> list[RecistMark]:
        return [m for m in self.marks if m.volume_id in volume_ids]


def _volume_id(i: int) -> str:
    return f"vol{i:04d}"


def _assign_splits(cfg: WorldConfig) -> list[Split]:
    n = cfg.n_volumes
    order = _rng(cfg.seed, _SPLIT).permutation(n)
    n_m = round(cfg.m_fraction * n)
    n_ht = round(cfg.h_test_fraction * n)
    n_dt = round(cfg.d_test_fraction * n)
    splits = [Split.H] * n
    for rank, vi in enumerate(order):
        if rank < n_m:
            splits[vi] = Split.M
        elif rank < n_m + n_ht:
            splits[vi] = Split.H_TEST
        elif rank < n_m + n_ht + n_dt:
            splits[vi] = Split.D_TEST
    return splits


def _disjoint(a: Box3D, others: Iterable[Box3D]) -> bool:
    for b in others:
        if a.z1 <= b.z2 and b.z1 <= a.z2 and a.x1 < b.x2 and b.x1 < a.x2 and a.y1 < b.y2 and b.y1 < a.y2:
            return False
    return True


def generate_world(cfg: WorldConfig) -> World:
    """Volumes, non-overlapping box lesions and one key-slice mark each.

    A lesion's mark is ``original`` with probability ``marked_fraction``
    and ``supplementary`` otherwise; only the fully annotated split gets to
    see supplementary marks during harvesting.
    """
    if cfg.size_max > min(cfg.width, cfg.height) or cfg.depth_max > cfg.n_slices:
        raise InputError("lesions can be larger than the volume")
    splits = _assign_splits(cfg)
    volumes, lesions, marks = [], [], []
    for vi in range(cfg.n_volumes):
        vid = _volume_id(vi)
        volumes.append(VolumeRecord(vid, cfg.n_slices, cfg.width, cfg.height, splits[vi]))
        rng = _rng(cfg.seed, _WORLD, vi)
        count = min(cfg.lesions_max, 1 + int(rng.poisson(cfg.lesions_mean - 1.0)))
        placed: list[Box3D] = []
        for _ in range(count):
            for _attempt in range(50):
                w = int(rng.integers(cfg.size_min, cfg.size_max + 1))
                h = int(rng.integers(cfg.size_min, cfg.size_max + 1))
                d = int(rng.integers(cfg.depth_min, cfg.depth_max + 1))
                x1 = int(rng.integers(0, cfg.width - w + 1))
                y1 = int(rng.integers(0, cfg.height - h + 1))
                z1 = int(rng.integers(0, cfg.n_slices - d + 1))
                box = Box3D(x1, y1, x1 + w, y1 + h, z1, z1 + d - 1)
                if _disjoint(box, placed):
                    break
            else:
                continue
            placed.append(box)
            lid = f"L{len(placed) - 1}"
            key_z = int(rng.integers(box.z1, box.z2 + 1))
            origin = ORIGINAL if rng.random() < cfg.marked_fraction else SUPPLEMENTARY
            lesions.append(GroundTruth3D(vid, lid, box))
            marks.append(RecistMark(vid, lid, key_z, box.xy, origin))
    return World(cfg, tuple(volumes), tuple(lesions), tuple(marks))


def _clip_score(rng: np.random.Generator, mean_sd: tuple[float, float]) -> float:
    return float(np.clip(rng.normal(*mean_sd), 0.0, 1.0))


def _jittered(rng: np.random.Generator, box: Box2D, jitter: float, width: int, height: int) -> Optional[Box2D]:
    if jitter == 0:
        return box
    sx, sy = jitter * box.width, jitter * box.height
    x1, x2 = box.x1 + rng.normal(0, sx), box.x2 + rng.normal(0, sx)
    y1, y2 = box.y1 + rng.normal(0, sy), box.y2 + rng.normal(0, sy)
    x1, x2 = max(0.0, min(x1, x2)), min(float(width), max(x1, x2))
    y1, y2 = max(0.0, min(y1, y2)), min(float(height), max(y1, y2))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return Box2D(x1, y1, x2, y2)


def oracle_lpg(
    world: World,
    skill: OracleSkill,
    round: int = 0,
    volume_ids: Optional[set[str]] = None,
    stream: int = _LPG,
) -> list[Detection2D]:
    """Per-slice detections for every volume.

    Each lesion slice is found with probability ``detect_base`` as a
    jittered box scoring around ``true_score_mean``; each slice also gets
    ``Poisson(fp_rate)`` spurious boxes scoring around 0.35.
    """
    cfg = world.config
    by_vol: dict[str, list[GroundTruth3D]] = {}
    for g in world.lesions:
        by_vol.setdefault(g.volume_id, []).append(g)
    dets: list[Detection2D] = []
    for vi, vol in enumerate(world.volumes):
        if volume_ids is not None and vol.volume_id not in volume_ids:
            continue
        lesions = by_vol.get(vol.volume_id, [])
        for z in range(vol.n_slices):
            rng = _rng(cfg.seed, stream, round, vi, z)
            for g in lesions:
                if not g.box.contains_slice(z):
                    continue
                if rng.random() >= skill.detect_base:
                    continue
                box = _jittered(rng, g.box.xy, skill.jitter, vol.width, vol.height)
                score = _clip_score(rng, (skill.true_score_mean, skill.true_score_sd))
                if box is not None:
                    dets.append(Detection2D(vol.volume_id, z, box, score))
            for _ in range(int(rng.poisson(skill.fp_rate))):
                w = float(rng.integers(cfg.size_min, cfg.size_max + 1))
                h = float(rng.integers(cfg.size_min, cfg.size_max + 1))
                x1 = float(rng.uniform(0, vol.width - w))
                y1 = float(rng.uniform(0, vol.height - h))
                dets.append(Detection2D(vol.volume_id, z, Box2D(x1, y1, x1 + w, y1 + h), _clip_score(rng, _SPURIOUS_SCORE)))
    return dets


def _separation(auc: float) -> float:
    """Mean gap between unit-variance normals whose AUC is ``auc``."""
    return math.sqrt(2.0) * NormalDist().inv_cdf(auc)


def is_true_proposal(p: Proposal3D, world: World, iou_thresh: float = 0.5) -> bool:
    return any(m.volume_id == p.volume_id and p3d_match(p.extent, m, iou_thresh) for m in world.marks)


def oracle_lpc(proposal: Proposal3D, world: World, skill: OracleSkill, round: int = 0) -> float:
    """Classifier probability drawn from a binormal model with the skill's AUC,
    conditioned on whether the proposal truly hits a lesion."""
    truth = is_true_proposal(proposal, world)
    if skill.clf_auc >= 1.0:
        return 1.0 if truth else 0.0
    if skill.clf_auc <= 0.0:
        return 0.0 if truth else 1.0
    d = _separation(skill.clf_auc)
    rng = _rng(world.config.seed, _LPC, round, zlib.crc32(proposal.id.encode("utf-8")))
    x = rng.normal(d if truth else 0.0, 1.0)
    return float(NormalDist().cdf(x - d / 2.0))


def update_skill(skill: OracleSkill, labels: Sequence[TrainingLabel]) -> OracleSkill:
    """Monotone surrogate for finetuning on exported labels.

    Detection improves with the share of harvested positives among all
    positives; the false-positive rate shrinks with the share of hard
    negatives among all labels.
    """
    n_pos = sum(1 for l in labels if l.positive)
    n_harvested = sum(1 for l in labels if l.positive and l.source == "harvested")
    n_neg = sum(1 for l in labels if not l.positive)
    new_pos = n_harvested / n_pos if n_pos else 0.0
    coverage = n_neg / (n_neg + n_pos) if (n_neg + n_pos) else 0.0
    detect = min(1.0, skill.detect_base + skill.gain_pos * new_pos)
    fp_rate = max(0.0, skill.fp_rate * (1.0 - min(1.0, skill.gain_neg * coverage)))
    return replace(skill, detect_base=detect, fp_rate=fp_rate)


# ---------------------------------------------------------------------------
# End-to-end loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationResult:
    world: World
    reports: tuple[Report, ...]
    states: tuple[HarvestState, ...]
    skills: tuple[OracleSkill, ...]
    converged_at: Optional[int] = None


def run_simulation(
    cfg: WorldConfig,
    skill: OracleSkill,
    rounds: int,
    params: HarvestParams = HarvestParams(),
    t_G: float = DEFAULT_T_G,
    stack_iou: float = DEFAULT_STACK_IOU,
    kalman: Optional[KalmanConfig] = None,
    run_id: str = "sim",
    stop_on_convergence: bool = False,
) -> SimulationResult:
    """Drive world -> detector -> stacking -> harvesting -> skill update.

    Report 0 describes the baseline label set (original marks only); report
    ``r`` follows harvesting round ``r``. Reports are evaluated on the
    held-out harvest volumes against their complete marks.
    """
    world = generate_world(cfg)
    held_out = world.volume_ids(Split.H_TEST)
    ctx = HarvestContext.build(world.volumes, world.marks, params, eval_marks=world.marks_in(held_out))
    state = HarvestState.initial(params)
    states = [state]
    skills = [skill]
    reports = [round_report(run_id, 0, state, ctx, skill)]
    converged_at = None
    for r in range(1, rounds + 1):
        dets = oracle_lpg(world, skill, round=r)
        proposals = stack_detections(dets, t_G=t_G, stack_iou=stack_iou, kalman=kalman, round=r)
        current = skill
        state = run_iteration(state, proposals, ctx, classify=lambda p: oracle_lpc(p, world, current, r))
        states.append(state)
        reports.append(round_report(run_id, r, state, ctx, skill))
        skill = update_skill(skill, export_training_labels(state, world.marks, world.volumes))
        skills.append(skill)
        if converged_at is None and check_convergence(
            state.recall_history, params.convergence_window, params.convergence_epsilon
        ):
            converged_at = r
            if stop_on_convergence:
                break
    return SimulationResult(world, tuple(reports), tuple(states), tuple(skills), converged_at)


def round_report(run_id: str, k: int, state: HarvestState, ctx: HarvestContext, skill: OracleSkill) -> Report:
    result = evaluate_label_set(state, ctx)
    pool_precision = float(result.is_tp.mean()) if len(result.is_tp) else 1.0
    pool_recall = float(result.recalled.mean()) if result.n_marks else 0.0
    extra = {
        "pool_precision": pool_precision,
        "pool_recall": pool_recall,
        "skill": {
            "detect_base": skill.detect_base,
            "fp_rate": skill.fp_rate,
            "jitter": skill.jitter,
            "clf_auc": skill.clf_auc,
        },
    }
    return build_report(run_id, k, state, result, extra=extra)


# ---------------------------------------------------------------------------
# Metric concordance
# ---------------------------------------------------------------------------

CONCORDANCE_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class ConcordanceResult:
    fp_rates: tuple[float, ...]
    recalls: dict[str, np.ndarray]  # mode -> (levels, fp_rates)
    pearson_p3d: float
    pearson_recist2d: float


def default_skill_levels() -> list[OracleSkill]:
    """Twelve detectors spanning weak to strong sensitivity, specificity
    and localisation."""
    grid = [
        (0.50, 1.00, 0.06),
        (0.55, 0.80, 0.06),
        (0.60, 0.90, 0.05),
        (0.65, 0.60, 0.05),
        (0.70, 0.70, 0.045),
        (0.75, 0.40, 0.04),
        (0.80, 0.50, 0.04),
        (0.85, 0.30, 0.035),
        (0.88, 0.40, 0.03),
        (0.90, 0.20, 0.03),
        (0.93, 0.15, 0.025),
        (0.96, 0.10, 0.02),
    ]
    return [OracleSkill(detect_base=d, fp_rate=f, jitter=j) for d, f, j in grid]


def concordance_experiment(
    cfg: WorldConfig,
    levels: Optional[Sequence[OracleSkill]] = None,
    fp_rates: Sequence[float] = CONCORDANCE_FP_RATES,
    t_G: float = DEFAULT_T_G,
    stack_iou: float = DEFAULT_STACK_IOU,
) -> ConcordanceResult:
    """Recall at FROC operating points for several simulated detectors under
    three matching rules, and how well each proxy tracks 3D IoU.

    Pseudo-3D uses the complete key-slice marks; the legacy 2D rule sees
    only the original (incomplete) marks; 3D IoU uses the lesion boxes.
    """
    levels = list(levels) if levels is not None else default_skill_levels()
    world = generate_world(cfg)
    complete = list(world.marks)
    incomplete = world.original_marks
    n_vol = len(world.volumes)
    recalls = {"p3d": [], "iou3d": [], "recist2d": []}
    for li, skill in enumerate(levels):
        dets = oracle_lpg(world, skill, round=li, stream=_CONCORDANCE)
        props = stack_detections(dets, t_G=t_G, stack_iou=stack_iou, round=li)
        runs = {
            "p3d": match_all(props, complete, "p3d", n_volumes=n_vol),
            "iou3d": match_all(props, (), "iou3d", gt3d=world.lesions, n_volumes=n_vol),
            "recist2d": match_all(props, incomplete, "recist2d", n_volumes=n_vol),
        }
        for mode, res in runs.items():
            recalls[mode].append(recall_at_fp(froc_curve(res), fp_rates))
    arrays = {k: np.asarray(v, dtype=float) for k, v in recalls.items()}
    gold = arrays["iou3d"].ravel()
    return ConcordanceResult(
        tuple(fp_rates),
        arrays,
        pearson(arrays["p3d"].ravel(), gold),
        pearson(arrays["recist2d"].ravel(), gold),
    )
