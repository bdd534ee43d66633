"""Per-round evaluation report shared by real-data and simulated runs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from .metrics import (
    FP_RATES,
    STANDARD_PRECISIONS,
    MatchResult,
    average_precision,
    froc_curve,
    mean_recall,
    pr_curve,
    recall_at_fp,
    recall_at_precision,
)

__all__ = ["REPORT_SCHEMA", "Report", "build_report", "q9"]

REPORT_SCHEMA = "report/1.0"


def q9(x: float) -> float:
    """Round to 9 significant digits, the precision every artifact is stored at."""
    if x is None or not math.isfinite(x):
        return x
    return float(f"{x:.9g}")


def _q(obj):
    if isinstance(obj, float):
        return q9(obj)
    if isinstance(obj, dict):
        return {k: _q(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_q(v) for v in obj]
    return obj


@dataclass
class Report:
    run_id: str
    k: int
    counts: dict[str, int] = field(default_factory=dict)
    tau: Optional[float] = None
    pr: list[list[float]] = field(default_factory=list)
    froc: list[list[float]] = field(default_factory=list)
    recall_at_precision: dict[str, float] = field(default_factory=dict)
    mean_recall: Optional[float] = None
    ap: Optional[float] = None
    recall_at_fp: dict[str, float] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = _q(asdict(self))
        if d["tau"] is not None and math.isinf(d["tau"]):
            d["tau"] = "inf"
        return {"schema": REPORT_SCHEMA, **d}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Report:
        d = dict(d)
        d.pop("schema", None)
        if d.get("tau") == "inf":
            d["tau"] = math.inf
        return cls(**d)


def _counts(state) -> dict[str, int]:
    return {
        "P_M_true": len(state.m_true),
        "P_M_false": len(state.m_false),
        "P_H_true": len(state.h_true.proposals),
        "P_H_pool": len(state.pool.proposals),
        "P_H_new": len(state.additions),
        "hard_negatives": len(state.hard_negatives),
    }


def build_report(run_id: str, k: int, state, result: Optional[MatchResult], extra=None) -> Report:
    """Assemble a report from a harvest state and an evaluation match.

    ``state`` may be None for pure evaluation runs.
    """
    rep = Report(run_id=run_id, k=k, extra=_q(extra or {}))
    if state is not None:
        rep.counts = _counts(state)
        rep.tau = q9(state.tau)
    if result is not None and result.n_marks > 0:
        pr = pr_curve(result)
        fr = froc_curve(result)
        rep.pr = _q([list(r) for r in pr.rows()])
        rep.froc = _q([list(r) for r in fr.rows()])
        rep.recall_at_precision = {f"{p:g}": q9(recall_at_precision(pr, p)) for p in STANDARD_PRECISIONS}
        rep.mean_recall = q9(mean_recall(pr))
        rep.ap = q9(average_precision(pr))
        rep.recall_at_fp = {f"{f:g}": q9(r) for f, r in zip(FP_RATES, recall_at_fp(fr, FP_RATES))}
    return rep
