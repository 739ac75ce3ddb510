"""Strict JSON run configuration.

Every section is optional except ``seed``; omitted values take the defaults
below.  Unknown keys are rejected.  Relative input paths are resolved against
the directory holding the config file; ``output_dir`` is kept as written and
taken relative to the working directory, like every ``--out`` option.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .activation import DEFAULT_CV
from .cellular import DEFAULT_APD_RANGE
from .repolarisation import PARAM_NAMES
from .sensitivity import PRIOR_BOUNDS
from .therapy import DRUG_DURATION, IKR_SHARE

MANDATORY = ("seed",)


class ConfigError(ValueError):
    pass


@dataclass
class MeshSection:
    path: str | None = None  # use an existing mesh.json instead of generating
    kind: str = "biv"
    resolution: float = 0.25


@dataclass
class TableSection:
    path: str | None = None
    apd_range: tuple = DEFAULT_APD_RANGE


@dataclass
class ActivationSection:
    roots: str | None = None
    cv: tuple = DEFAULT_CV


@dataclass
class ElectrodeSection:
    path: str | None = None  # None places the default torso-box electrodes


@dataclass
class SimulationSection:
    duration: int = 600
    smoothing: bool = True
    k_self: float = 20.0
    diffusivity: str = "identity"


@dataclass
class TargetSection:
    path: str | None = None  # ECG CSV; otherwise a synthetic target from theta
    theta: tuple = (1.0, 0.1, -1.0, 0.3, 216.0, 294.0)


@dataclass
class InferenceSection:
    population_size: int = 256
    samples_per_iteration: int = 64
    discrepancy_cutoff: float = 0.5
    uniqueness_threshold: float = 0.5
    apd_grid: float = 2.0
    gradient_grid: float = 0.1
    move_probability: float = 0.5
    max_iterations: int = 1000


@dataclass
class DrugSection:
    enabled: bool = True
    doses: str = "dofetilide"
    fraction: float = 0.05
    share: float = IKR_SHARE
    duration: int = DRUG_DURATION


@dataclass
class SensitivitySection:
    enabled: bool = False
    base_n: int = 64


@dataclass
class RunConfig:
    seed: int
    output_dir: str = "run"
    mesh: MeshSection = field(default_factory=MeshSection)
    table: TableSection = field(default_factory=TableSection)
    activation: ActivationSection = field(default_factory=ActivationSection)
    electrodes: ElectrodeSection = field(default_factory=ElectrodeSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    target: TargetSection = field(default_factory=TargetSection)
    bounds: dict = field(default_factory=lambda: {n: list(b) for n, b in zip(PARAM_NAMES, PRIOR_BOUNDS)})
    inference: InferenceSection = field(default_factory=InferenceSection)
    drug: DrugSection = field(default_factory=DrugSection)
    sensitivity: SensitivitySection = field(default_factory=SensitivitySection)

    def bounds_tuple(self) -> tuple:
        return tuple(tuple(self.bounds[n]) for n in PARAM_NAMES)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def inference_config(self):
        from .inference import InferenceConfig

        return InferenceConfig(bounds=self.bounds_tuple(), seed=self.seed,
                               **dataclasses.asdict(self.inference))


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)
            if isinstance(f.default_factory, type)}
PATH_KEYS = (("mesh", "path"), ("table", "path"), ("activation", "roots"),
             ("electrodes", "path"), ("target", "path"))


def _coerce(where: str, value, default):
    """Check ``value`` against the type of the default it replaces."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return tuple(_coerce(f"{where}[{k}]", v, d) for k, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _section(name: str, raw, cls):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    base = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: " + ", ".join(unknown))
    values = {k: _coerce(f"{name}.{k}", raw[k], getattr(base, k)) for k in raw}
    return dataclasses.replace(base, **values)


def _bounds(raw) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("bounds: expected an object keyed by parameter name")
    unknown = sorted(set(raw) - set(PARAM_NAMES))
    if unknown:
        raise ConfigError("unknown key(s) in bounds: " + ", ".join(unknown))
    out = {n: list(b) for n, b in zip(PARAM_NAMES, PRIOR_BOUNDS)}
    for name, pair in raw.items():
        lo, hi = _coerce(f"bounds.{name}", pair, (0.0, 0.0))
        if lo > hi:
            raise ConfigError(f"bounds.{name}: lower bound exceeds upper bound")
        out[name] = [lo, hi]
    return out


def _validate(cfg: RunConfig) -> None:
    if cfg.mesh.kind not in ("slab", "biv"):
        raise ConfigError("mesh.kind must be 'slab' or 'biv'")
    if cfg.mesh.resolution <= 0:
        raise ConfigError("mesh.resolution must be positive")
    lo, hi = cfg.table.apd_range
    if not 0 < lo < hi:
        raise ConfigError("table.apd_range must satisfy 0 < lo < hi")
    if min(cfg.activation.cv) <= 0:
        raise ConfigError("activation.cv must be positive")
    if cfg.simulation.diffusivity not in ("identity", "orthotropic"):
        raise ConfigError("simulation.diffusivity must be 'identity' or 'orthotropic'")
    if cfg.simulation.duration < 1 or cfg.drug.duration < 1:
        raise ConfigError("durations must be positive")
    if not 0 < cfg.drug.fraction <= 1:
        raise ConfigError("drug.fraction must lie in (0, 1]")
    if cfg.sensitivity.base_n < 2:
        raise ConfigError("sensitivity.base_n must be at least 2")
    try:
        cfg.inference_config()
    except ValueError as exc:
        raise ConfigError(f"inference: {exc}") from exc


def config_from_dict(data: dict, base_dir=None, check_paths: bool = True) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in MANDATORY if k not in data]
    if missing:
        raise ConfigError("missing mandatory key(s): " + ", ".join(missing))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("unknown key(s): " + ", ".join(unknown))
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    kw = {"seed": seed}
    if "output_dir" in data:
        kw["output_dir"] = _coerce("output_dir", data["output_dir"], "")
    if "bounds" in data:
        kw["bounds"] = _bounds(data["bounds"])
    for name, cls in SECTIONS.items():
        if name in data:
            kw[name] = _section(name, data[name], cls)
    cfg = RunConfig(**kw)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for section, key in PATH_KEYS:
        sec = getattr(cfg, section)
        value = getattr(sec, key)
        if value is None:
            continue
        path = Path(value) if Path(value).is_absolute() else base / value
        if check_paths and not path.exists():
            raise ConfigError(f"{section}.{key}: path does not exist: {path}")
        setattr(sec, key, str(path))
    _validate(cfg)
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, path.parent)


def default_config_dict(seed: int = 0) -> dict:
    """All keys with their default values, suitable for editing."""
    cfg = RunConfig(seed=seed)
    return cfg.to_dict()
