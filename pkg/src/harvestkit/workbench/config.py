"""Run configuration: defaults, YAML/JSON file, environment, then CLI flags.

Environment overrides use the ``HARVESTKIT_`` prefix followed by the
upper-cased key, with ``__`` descending into sections::

    HARVESTKIT_T_G=0.2
    HARVESTKIT_WORLD__N_VOLUMES=50
    HARVESTKIT_PATHS__MARKS=data/marks.jsonl
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from ..errors import InputError
from ..harvester import HarvestParams
from ..simulator import OracleSkill, WorldConfig
from ..tracker3d import KalmanConfig

__all__ = ["ENV_PREFIX", "Paths", "RunConfig", "load_config"]

ENV_PREFIX = "HARVESTKIT_"


@dataclass(frozen=True)
class Paths:
    volumes: Optional[str] = None
    marks: Optional[str] = None
    detections: Optional[str] = None  # may contain "{round}"
    scores: Optional[str] = None  # may contain "{round}"
    proposals: Optional[str] = None  # may contain "{round}"
    eval_marks: Optional[str] = None
    gt3d: Optional[str] = None
    output: Optional[str] = None


_RATIOS = ("t_G", "stack_iou", "p3d_iou", "iou3d_gold", "target_precision", "hard_neg_min_sg")


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = Paths()
    t_G: float = 0.1
    stack_iou: float = 0.8
    p3d_iou: float = 0.5
    iou3d_gold: float = 0.3
    target_precision: float = 0.95
    hard_neg_min_sg: float = 0.5
    hard_neg_cap: int = 5
    stride: int = 4
    convergence_window: int = 2
    convergence_epsilon: float = 0.005
    seed: int = 0
    max_rounds: int = 6
    run_id: str = "run"
    kalman: KalmanConfig = KalmanConfig()
    world: WorldConfig = WorldConfig()
    skill: OracleSkill = OracleSkill()

    def __post_init__(self):
        for name in _RATIOS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"config: {name} must lie in [0, 1], got {v}")
        if self.hard_neg_cap < 0:
            raise InputError("config: hard_neg_cap must be >= 0")
        if self.stride < 1:
            raise InputError("config: stride must be >= 1")
        if self.convergence_window < 1 or self.convergence_epsilon < 0:
            raise InputError("config: convergence window must be >= 1 and epsilon >= 0")
        if self.max_rounds < 0:
            raise InputError("config: max_rounds must be >= 0")
        if self.world.seed != self.seed:
            object.__setattr__(self, "world", dataclasses.replace(self.world, seed=self.seed))

    @property
    def harvest_params(self) -> HarvestParams:
        return HarvestParams(
            p3d_iou=self.p3d_iou,
            same_lesion_iou3d=self.iou3d_gold,
            target_precision=self.target_precision,
            hard_neg_min_sg=self.hard_neg_min_sg,
            hard_neg_cap=self.hard_neg_cap,
            convergence_window=self.convergence_window,
            convergence_epsilon=self.convergence_epsilon,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> RunConfig:
        return _build(cls, data, "")


_SECTIONS = {"paths": Paths, "kalman": KalmanConfig, "world": WorldConfig, "skill": OracleSkill}


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise InputError(f"config{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise InputError(f"config{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        section = _SECTIONS.get(key) if cls is RunConfig else None
        if section is not None:
            kwargs[key] = _build(section, value or {}, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(fields[key], value, f"{where}.{key}".lstrip("."))
    try:
        return cls(**kwargs)
    except InputError:
        raise
    except (TypeError, ValueError) as exc:
        raise InputError(f"config{where}: {exc}") from None


def _coerce(f: dataclasses.Field, value: Any, name: str):
    target = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if value is None or "Optional" in target:
            return value if value is None else str(value)
        if target == "bool":
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if target == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if target == "float":
            return float(value)
        if target == "str":
            return str(value)
    except (TypeError, ValueError):
        raise InputError(f"config: {name} has invalid value {value!r}") from None
    return value


def _env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    fields = {f.name.lower(): f.name for f in dataclasses.fields(RunConfig)}
    out: dict[str, Any] = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        top = fields.get(parts[0])
        if top is None:
            raise InputError(f"environment: unknown setting {key}")
        if len(parts) == 1:
            out[top] = value
        else:
            sub_cls = _SECTIONS.get(top)
            names = {f.name.lower(): f.name for f in dataclasses.fields(sub_cls)} if sub_cls else {}
            sub = names.get(parts[1])
            if sub is None or len(parts) > 2:
                raise InputError(f"environment: unknown setting {key}")
            out.setdefault(top, {})[sub] = value
    return out


def _merge(base: dict[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Layer a config file, ``HARVESTKIT_*`` variables and explicit overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InputError(f"config {path}: {exc}") from None
        if loaded is not None:
            if not isinstance(loaded, Mapping):
                raise InputError(f"config {path}: top level must be a mapping")
            data = dict(loaded)
    data = _merge(data, _env_overrides(os.environ if environ is None else environ))
    data = _merge(data, overrides or {})
    return RunConfig.from_mapping(data)
