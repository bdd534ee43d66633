"""JSON Lines persistence for every record the pipeline exchanges.

Each record carries a ``schema`` tag ``"<kind>/<major>.<minor>"``. Readers
accept any minor version of a major they know and reject newer majors.
Fields a reader does not recognise are kept in the record's ``extra``
mapping and written back out unchanged. Floats are stored with 9
significant digits.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Mapping, TypeVar

from ..errors import InputError, SchemaError
from ..geometry import Box2D, Box3D, RecistMark
from ..harvester import HarvestPool, HarvestState, Split, TrainingLabel, VolumeRecord
from ..metrics import GroundTruth3D
from ..report import Report, q9
from ..tracker3d import Detection2D, Member, Proposal3D

__all__ = [
    "SCHEMA_VERSIONS",
    "dump_record",
    "load_record",
    "read_jsonl",
    "read_state",
    "write_jsonl",
    "write_state",
]

T = TypeVar("T")

SCHEMA_VERSIONS = {
    "detection": (1, 0),
    "mark": (1, 0),
    "proposal": (1, 0),
    "volume": (1, 0),
    "score": (1, 0),
    "label": (1, 0),
    "lesion3d": (1, 0),
    "state": (1, 0),
    "report": (1, 0),
}


def schema_tag(kind: str) -> str:
    major, minor = SCHEMA_VERSIONS[kind]
    return f"{kind}/{major}.{minor}"


def check_schema(d: Mapping[str, Any], kind: str) -> None:
    tag = d.get("schema")
    if tag is None:
        raise SchemaError("missing field", field="schema")
    try:
        name, version = str(tag).split("/", 1)
        major = int(version.split(".", 1)[0])
    except ValueError:
        raise SchemaError(f"malformed schema tag {tag!r}", field="schema") from None
    if name != kind:
        raise SchemaError(f"expected a {kind!r} record, got {name!r}", field="schema")
    if major > SCHEMA_VERSIONS[kind][0]:
        raise SchemaError(f"unsupported {kind} schema major version {major}", field="schema")


def _get(d: Mapping[str, Any], name: str, kind: type | tuple = (int, float)):
    if name not in d:
        raise SchemaError("missing field", field=name)
    v = d[name]
    if isinstance(v, bool) and kind != bool:
        raise SchemaError(f"expected a number, got {v!r}", field=name)
    if not isinstance(v, kind):
        raise SchemaError(f"wrong type {type(v).__name__}", field=name)
    return v


def _num(d, name) -> float:
    v = float(_get(d, name))
    if not math.isfinite(v):
        raise SchemaError("value must be finite", field=name)
    return v


def _int(d, name) -> int:
    v = _get(d, name)
    if int(v) != v:
        raise SchemaError(f"expected an integer, got {v!r}", field=name)
    return int(v)


def _str(d, name) -> str:
    return str(_get(d, name, (str, int)))


def _opt_num(d, name):
    return None if d.get(name) is None else _num(d, name)


def _box(d, prefix="") -> Box2D:
    coords = [_num(d, prefix + k) for k in ("x1", "y1", "x2", "y2")]
    try:
        return Box2D(*coords)
    except InputError as exc:
        raise SchemaError(f"range error: {exc}", field=prefix + "x1..y2") from None


def _extra(d: Mapping[str, Any], known: Iterable[str]) -> dict[str, Any]:
    known = set(known) | {"schema"}
    return {k: v for k, v in d.items() if k not in known}


def _guard(fn: Callable[[], T], field: str | None = None) -> T:
    """Run a constructor and turn domain errors into range errors."""
    try:
        return fn()
    except SchemaError:
        raise
    except (InputError, ValueError) as exc:
        raise SchemaError(f"range error: {exc}", field=field) from None


# ---------------------------------------------------------------------------
# Per-kind codecs
# ---------------------------------------------------------------------------

_DET_FIELDS = ("volume_id", "z", "x1", "y1", "x2", "y2", "score")
_MARK_FIELDS = ("volume_id", "lesion_id", "z", "x1", "y1", "x2", "y2", "origin")
_PROP_FIELDS = ("id", "volume_id", "x1", "y1", "x2", "y2", "z1", "z2", "members", "s_g", "s_c", "s", "round")
_VOL_FIELDS = ("volume_id", "n_slices", "width", "height", "split")
_LABEL_FIELDS = ("volume_id", "z", "x1", "y1", "x2", "y2", "positive", "source", "score")
_GT_FIELDS = ("volume_id", "lesion_id", "x1", "y1", "x2", "y2", "z1", "z2")


def _box_fields(b: Box2D) -> dict[str, float]:
    return {"x1": q9(b.x1), "y1": q9(b.y1), "x2": q9(b.x2), "y2": q9(b.y2)}


def _dump_detection(r: Detection2D) -> dict:
    return {"volume_id": r.volume_id, "z": r.z, **_box_fields(r.box), "score": q9(r.score), **r.extra}


def _load_detection(d) -> Detection2D:
    box, score, z = _box(d), _num(d, "score"), _int(d, "z")
    return _guard(lambda: Detection2D(_str(d, "volume_id"), z, box, score, _extra(d, _DET_FIELDS)), "score")


def _dump_mark(r: RecistMark) -> dict:
    return {
        "volume_id": r.volume_id,
        "lesion_id": r.lesion_id,
        "z": r.z,
        **_box_fields(r.box),
        "origin": r.origin,
        **r.extra,
    }


def _load_mark(d) -> RecistMark:
    box, z = _box(d), _int(d, "z")
    origin = d.get("origin", "original")
    return _guard(
        lambda: RecistMark(_str(d, "volume_id"), _str(d, "lesion_id"), z, box, origin, _extra(d, _MARK_FIELDS)),
        "origin",
    )


def _dump_proposal(r: Proposal3D) -> dict:
    e = r.extent
    out = {
        "id": r.id,
        "volume_id": r.volume_id,
        "x1": q9(e.x1),
        "y1": q9(e.y1),
        "x2": q9(e.x2),
        "y2": q9(e.y2),
        "z1": e.z1,
        "z2": e.z2,
        "members": [{"z": m.z, **_box_fields(m.box), "score": q9(m.score)} for m in r.members],
        "s_g": q9(r.s_g),
    }
    if r.s_c is not None:
        out["s_c"] = q9(r.s_c)
    if r.s is not None:
        out["s"] = q9(r.s)
    out["round"] = r.round
    out.update(r.extra)
    return out


def _load_proposal(d) -> Proposal3D:
    z1, z2 = _int(d, "z1"), _int(d, "z2")
    box = _box(d)
    extent = _guard(lambda: Box3D.from_xy(box, z1, z2), "z2")
    raw = _get(d, "members", list)
    members = []
    for i, m in enumerate(raw):
        if not isinstance(m, dict):
            raise SchemaError("member must be an object", field=f"members[{i}]")
        try:
            members.append(Member(_int(m, "z"), _box(m), _num(m, "score")))
        except SchemaError as exc:
            raise SchemaError(exc.message, field=f"members[{i}].{exc.field}") from None
    s_g, s_c, s = _num(d, "s_g"), _opt_num(d, "s_c"), _opt_num(d, "s")
    rnd = _int(d, "round") if "round" in d else 0
    return _guard(
        lambda: Proposal3D(
            _str(d, "id"), _str(d, "volume_id"), extent, tuple(members), s_g, s_c, s, rnd, _extra(d, _PROP_FIELDS)
        ),
        "s_g",
    )


def _dump_volume(r: VolumeRecord) -> dict:
    return {"volume_id": r.volume_id, "n_slices": r.n_slices, "width": r.width, "height": r.height, "split": r.split.value}


def _load_volume(d) -> VolumeRecord:
    split = _str(d, "split")
    if split not in {s.value for s in Split}:
        raise SchemaError(f"unknown split {split!r}", field="split")
    return _guard(
        lambda: VolumeRecord(_str(d, "volume_id"), _int(d, "n_slices"), _int(d, "width"), _int(d, "height"), Split(split)),
        "n_slices",
    )


def _dump_label(r: TrainingLabel) -> dict:
    return {
        "volume_id": r.volume_id,
        "z": r.z,
        **_box_fields(r.box),
        "positive": r.positive,
        "source": r.source,
        "score": q9(r.score),
        **r.extra,
    }


def _load_label(d) -> TrainingLabel:
    return TrainingLabel(
        _str(d, "volume_id"),
        _int(d, "z"),
        _box(d),
        bool(_get(d, "positive", bool)),
        _str(d, "source"),
        _num(d, "score") if "score" in d else 1.0,
        _extra(d, _LABEL_FIELDS),
    )


def _dump_gt(r: GroundTruth3D) -> dict:
    b = r.box
    return {"volume_id": r.volume_id, "lesion_id": r.lesion_id, **_box_fields(b.xy), "z1": b.z1, "z2": b.z2}


def _load_gt(d) -> GroundTruth3D:
    box, z1, z2 = _box(d), _int(d, "z1"), _int(d, "z2")
    return GroundTruth3D(_str(d, "volume_id"), _str(d, "lesion_id"), _guard(lambda: Box3D.from_xy(box, z1, z2), "z2"))


def _dump_score(r: tuple[str, float]) -> dict:
    return {"id": r[0], "s_c": q9(r[1])}


def _load_score(d) -> tuple[str, float]:
    s_c = _num(d, "s_c")
    if not 0.0 <= s_c <= 1.0:
        raise SchemaError(f"range error: s_c must lie in [0, 1], got {s_c}", field="s_c")
    return (_str(d, "id"), s_c)


_CODECS: dict[type, tuple[str, Callable]] = {
    Detection2D: ("detection", _dump_detection),
    RecistMark: ("mark", _dump_mark),
    Proposal3D: ("proposal", _dump_proposal),
    VolumeRecord: ("volume", _dump_volume),
    TrainingLabel: ("label", _dump_label),
    GroundTruth3D: ("lesion3d", _dump_gt),
}

_LOADERS: dict[str, Callable[[Mapping[str, Any]], Any]] = {
    "detection": _load_detection,
    "mark": _load_mark,
    "proposal": _load_proposal,
    "volume": _load_volume,
    "label": _load_label,
    "lesion3d": _load_gt,
    "score": _load_score,
}


def dump_record(record: Any, kind: str | None = None) -> dict[str, Any]:
    if kind == "score":
        return {"schema": schema_tag("score"), **_dump_score(record)}
    try:
        name, dump = _CODECS[type(record)]
    except KeyError:
        raise InputError(f"no record codec for {type(record).__name__}") from None
    return {"schema": schema_tag(name), **dump(record)}


def load_record(d: Mapping[str, Any], kind: str) -> Any:
    if not isinstance(d, Mapping):
        raise SchemaError("record must be a JSON object")
    check_schema(d, kind)
    return _LOADERS[kind](d)


def encode_line(obj: Mapping[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False)


def read_jsonl(path: str | Path, kind: str) -> Iterator[Any]:
    """Stream records of one kind, attaching the line number to any error."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"malformed JSON: {exc.msg}", line=lineno, source=path) from None
            try:
                yield load_record(d, kind)
            except SchemaError as exc:
                raise SchemaError(exc.message, line=lineno, field=exc.field, source=path) from None


def write_jsonl(path: str | Path, records: Iterable[Any], kind: str | None = None) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(encode_line(dump_record(r, kind)) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Harvest state
# ---------------------------------------------------------------------------


def _tau_out(t: float):
    return "inf" if math.isinf(t) else q9(t)


def _tau_in(t) -> float:
    return math.inf if t == "inf" else float(t)


def state_to_dict(state: HarvestState) -> dict[str, Any]:
    props = lambda ps: [_dump_proposal(p) for p in ps]  # noqa: E731
    return {
        "schema": schema_tag("state"),
        "k": state.k,
        "tau": _tau_out(state.tau),
        "tau_history": [_tau_out(t) for t in state.tau_history],
        "recall_history": [q9(r) for r in state.recall_history],
        "same_lesion_iou3d": state.pool.same_lesion_iou3d,
        "m_true": props(state.m_true),
        "m_false": props(state.m_false),
        "h_true_entries": props(state.h_true.entries),
        "pool_entries": props(state.pool.entries),
        "additions": props(state.additions),
        "hard_negatives": props(state.hard_negatives),
    }


def state_from_dict(d: Mapping[str, Any]) -> HarvestState:
    check_schema(d, "state")
    props = lambda name: tuple(_load_proposal(p) for p in d.get(name, []))  # noqa: E731
    thresh = float(d.get("same_lesion_iou3d", 0.3))
    return HarvestState(
        k=int(d["k"]),
        m_true=props("m_true"),
        m_false=props("m_false"),
        h_true=HarvestPool(props("h_true_entries"), thresh),
        pool=HarvestPool(props("pool_entries"), thresh),
        additions=props("additions"),
        hard_negatives=props("hard_negatives"),
        tau=_tau_in(d["tau"]),
        tau_history=tuple(_tau_in(t) for t in d.get("tau_history", [])),
        recall_history=tuple(float(r) for r in d.get("recall_history", [])),
    )


def write_json(path: str | Path, obj: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_state(path: str | Path, state: HarvestState) -> None:
    write_json(path, state_to_dict(state))


def read_state(path: str | Path) -> HarvestState:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc.msg}", line=exc.lineno, source=path) from None
    return state_from_dict(d)


def write_report(path: str | Path, report: Report) -> None:
    write_json(path, report.to_dict())


def read_report(path: str | Path) -> Report:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    check_schema(d, "report")
    return Report.from_dict(d)
