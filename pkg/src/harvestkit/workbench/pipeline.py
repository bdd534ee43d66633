"""Round drivers for real-data harvesting and for the simulator.

Every round is written to ``<out>/round_NN/`` and the driver continues
from what it just read back, never from the in-memory object. A resumed
run therefore sees exactly the bytes an uninterrupted run would have
seen.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import InputError, StateError
from ..harvester import (
    HarvestContext,
    HarvestState,
    Split,
    check_convergence,
    evaluate_label_set,
    export_training_labels,
    run_iteration,
)
from ..report import Report, build_report
from ..simulator import OracleSkill, World, generate_world, oracle_lpc, oracle_lpg, round_report, update_skill
from ..tracker3d import stack_detections
from .config import RunConfig
from .records import read_jsonl, read_report, read_state, write_json, write_jsonl, write_report, write_state

__all__ = ["RoundPaths", "harvest", "latest_round", "round_dir", "simulate"]

log = logging.getLogger(__name__)

_ROUND_DIR = re.compile(r"^round_(\d+)$")


def round_dir(out: str | Path, k: int) -> Path:
    return Path(out) / f"round_{k:02d}"


def latest_round(out: str | Path) -> Optional[int]:
    """Highest round whose state and report were both written."""
    out = Path(out)
    if not out.is_dir():
        return None
    done = []
    for child in out.iterdir():
        m = _ROUND_DIR.match(child.name)
        if m and (child / "state.json").is_file() and (child / "report.json").is_file():
            done.append(int(m.group(1)))
    return max(done) if done else None


@dataclass(frozen=True)
class RoundPaths:
    state: Path
    report: Path
    labels: Path
    proposals: Path
    skill: Path

    @classmethod
    def of(cls, out: str | Path, k: int) -> RoundPaths:
        d = round_dir(out, k)
        return cls(d / "state.json", d / "report.json", d / "labels.jsonl", d / "proposals.jsonl", d / "skill.json")


def _persist(paths: RoundPaths, state: HarvestState, report: Report, labels=None) -> tuple[HarvestState, Report]:
    paths.state.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(paths.proposals, state.pool.proposals)
    if labels is not None:
        write_jsonl(paths.labels, labels)
    write_state(paths.state, state)
    write_report(paths.report, report)  # written last: marks the round complete
    return read_state(paths.state), read_report(paths.report)


# ---------------------------------------------------------------------------
# Real data
# ---------------------------------------------------------------------------


def _template(path: Optional[str], k: int) -> Optional[Path]:
    return None if path is None else Path(path.replace("{round}", str(k)))


def _require(path: Optional[str], what: str) -> Path:
    if path is None:
        raise InputError(f"config: paths.{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def load_context(cfg: RunConfig) -> HarvestContext:
    volumes = list(read_jsonl(_require(cfg.paths.volumes, "volumes"), "volume"))
    marks = list(read_jsonl(_require(cfg.paths.marks, "marks"), "mark"))
    eval_marks = ()
    if cfg.paths.eval_marks is not None:
        eval_marks = tuple(read_jsonl(_require(cfg.paths.eval_marks, "eval_marks"), "mark"))
    return HarvestContext.build(volumes, marks, cfg.harvest_params, eval_marks)


def load_round_proposals(cfg: RunConfig, k: int):
    """Scored proposals for round ``k``, or None when the inputs are absent.

    Either a ready proposal file (with ``s_c``) or a detection file plus
    a score file keyed by proposal id.
    """
    p = _template(cfg.paths.proposals, k)
    if p is not None:
        return list(read_jsonl(p, "proposal")) if p.is_file() else None
    det = _template(cfg.paths.detections, k)
    sc = _template(cfg.paths.scores, k)
    if det is None or sc is None:
        raise InputError("config: set paths.proposals, or both paths.detections and paths.scores")
    if not (det.is_file() and sc.is_file()):
        return None
    props = stack_detections(
        list(read_jsonl(det, "detection")), t_G=cfg.t_G, stack_iou=cfg.stack_iou, kalman=cfg.kalman, round=k
    )
    scores = dict(read_jsonl(sc, "score"))
    missing = [q.id for q in props if q.id not in scores]
    if missing:
        raise InputError(f"{sc}: no classifier score for {len(missing)} proposal(s), first {missing[0]!r}")
    return [dataclasses.replace(q, s_c=scores[q.id]) for q in props]


def _harvest_report(cfg: RunConfig, k: int, state: HarvestState, ctx: HarvestContext) -> Report:
    result = evaluate_label_set(state, ctx) if ctx.eval_marks else None
    return build_report(cfg.run_id, k, state, result)


def harvest(cfg: RunConfig, out: str | Path, rounds: Optional[int] = None, resume: bool = False) -> list[Report]:
    """Run harvesting rounds until convergence, ``rounds`` or missing input."""
    out = Path(out)
    rounds = cfg.max_rounds if rounds is None else rounds
    ctx = load_context(cfg)
    last = latest_round(out) if resume else None
    if last is None:
        state0 = HarvestState.initial(ctx.params)
        state, _ = _persist(RoundPaths.of(out, 0), state0, _harvest_report(cfg, 0, state0, ctx))
        last = 0
    else:
        state = read_state(RoundPaths.of(out, last).state)
        log.info("resuming after round %d", last)
    reports = [read_report(RoundPaths.of(out, k).report) for k in range(last + 1)]
    for k in range(last + 1, rounds + 1):
        if check_convergence(state.recall_history, ctx.params.convergence_window, ctx.params.convergence_epsilon):
            log.info("converged after round %d", k - 1)
            break
        proposals = load_round_proposals(cfg, k)
        if proposals is None:
            log.info("no inputs for round %d; stopping", k)
            break
        nxt = run_iteration(state, proposals, ctx)
        labels = export_training_labels(nxt, ctx.marks, ctx.volumes)
        state, report = _persist(RoundPaths.of(out, k), nxt, _harvest_report(cfg, k, nxt, ctx), labels)
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _write_skill(path: Path, skill: OracleSkill) -> OracleSkill:
    write_json(path, {"schema": "skill/1.0", **dataclasses.asdict(skill)})
    d = json.loads(path.read_text(encoding="utf-8"))
    d.pop("schema")
    return OracleSkill(**d)


def _read_skill(path: Path) -> OracleSkill:
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.pop("schema", None) != "skill/1.0":
        raise StateError(f"{path}: not a skill record")
    return OracleSkill(**d)


def simulate_round(
    cfg: RunConfig, world: World, ctx: HarvestContext, state: HarvestState, skill: OracleSkill, k: int
) -> tuple[HarvestState, OracleSkill, list]:
    """One simulated round: detect, stack, harvest, then retrain the oracle."""
    dets = oracle_lpg(world, skill, round=k)
    proposals = stack_detections(dets, t_G=cfg.t_G, stack_iou=cfg.stack_iou, kalman=cfg.kalman, round=k)
    nxt = run_iteration(state, proposals, ctx, classify=lambda p: oracle_lpc(p, world, skill, k))
    labels = export_training_labels(nxt, world.marks, world.volumes)
    return nxt, update_skill(skill, labels), labels


def simulate(cfg: RunConfig, out: str | Path, rounds: Optional[int] = None, resume: bool = False) -> list[Report]:
    """Simulated harvest with the report of round 0 as the original-marks baseline.

    Report ``k`` describes the state after round ``k`` under the skill
    that produced it; ``skill.json`` holds the retrained skill for the
    next round.
    """
    out = Path(out)
    rounds = cfg.max_rounds if rounds is None else rounds
    world = generate_world(cfg.world)
    held_out = world.volume_ids(Split.H_TEST)
    ctx = HarvestContext.build(world.volumes, world.marks, cfg.harvest_params, world.marks_in(held_out))
    last = latest_round(out) if resume else None
    if last is None or not RoundPaths.of(out, last).skill.is_file():
        paths = RoundPaths.of(out, 0)
        state0 = HarvestState.initial(ctx.params)
        state, _ = _persist(paths, state0, round_report(cfg.run_id, 0, state0, ctx, cfg.skill))
        skill = _write_skill(paths.skill, cfg.skill)
        last = 0
    else:
        state = read_state(RoundPaths.of(out, last).state)
        skill = _read_skill(RoundPaths.of(out, last).skill)
        log.info("resuming simulation after round %d", last)
    reports = [read_report(RoundPaths.of(out, k).report) for k in range(last + 1)]
    for k in range(last + 1, rounds + 1):
        if check_convergence(state.recall_history, ctx.params.convergence_window, ctx.params.convergence_epsilon):
            log.info("converged after round %d", k - 1)
            break
        nxt, next_skill, labels = simulate_round(cfg, world, ctx, state, skill, k)
        paths = RoundPaths.of(out, k)
        # skill first: report.json is the completion marker
        paths.state.parent.mkdir(parents=True, exist_ok=True)
        new_skill = _write_skill(paths.skill, next_skill)
        state, report = _persist(paths, nxt, round_report(cfg.run_id, k, nxt, ctx, skill), labels)
        skill = new_skill
        reports.append(report)
    return reports
