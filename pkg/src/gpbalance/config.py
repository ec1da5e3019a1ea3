"""Scenario files: sectioned ``key = value`` text parsed into dataclasses.

Grammar: standard INI sections and keys; every value is read with
``ast.literal_eval`` and falls back to the raw string, so ``10``, ``0.5``,
``(1, 2)``, ``[1.0, 10.0]``, ``true`` and ``eic`` are all valid. Keys are
case-sensitive. Overrides use ``section.key=value`` with the same value rules.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

SCENARIO_PACKAGE = "gpbalance.scenarios"


class ConfigError(ValueError):
    """Malformed scenario file or override."""


def parse_value(text: str) -> Any:
    raw = text.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


@dataclass
class PlantConfig:
    model: str = "furuta"
    params: dict = field(default_factory=dict)


@dataclass
class NominalConfig:
    model: str = "furuta_varying"


@dataclass
class GpConfig:
    model_path: str | None = None
    n_points: int = 500
    hyper_subset: int | None = 150
    restarts: int = 2
    max_iter: int = 200
    method: str = "gd"
    seed: int = 0
    vartheta_floor: float = 1e-4
    sigma_f_rel: float | None = 10.0
    lengthscale_rel: float | None = 100.0


@dataclass
class ExcitationConfig:
    t_end: float = 20.0
    rate: float = 400.0
    targets: tuple = ()
    feedforward: tuple | None = None
    q_weight: Any = 1.0
    r_weight: float = 1.0
    discrete: bool = True
    ramp: float = 0.0
    seed: int = 0


@dataclass
class ControllerConfig:
    kind: str = "eic"
    alpha: float = 1.0
    idx_aa: tuple | None = None
    idx_au: tuple | None = None
    kp1: Any = 10.0
    kd1: Any = 3.0
    kp2: Any = 1000.0
    kd2: Any = 100.0
    kn1: float = 0.0
    kn2: float = 0.0
    kn3: float = 0.0
    kn4: float = 0.0
    bem_tol: float = 1e-8
    bem_max_iter: int = 50
    bem_cutoff_hz: float = 10.0
    bem_feedforward: str = "none"
    qddot_source: str = "designed"


@dataclass
class ReferenceConfig:
    terms: tuple = ()


@dataclass
class SimConfig:
    t_end: float = 30.0
    control_rate: float = 400.0
    substeps: int = 4
    seed: int = 0
    sensor_noise_std: Any = 0.0
    error_limit: float = 1.5
    fall_limit: float = 1.2
    q0: tuple | None = None
    qd0: tuple | None = None
    start_on_reference: bool = True
    plant: str = "true"


@dataclass
class AnalysisConfig:
    steady_fraction: float = 0.2
    eta_a: float = 0.95
    eta_u: float = 0.95
    c: tuple = (0.01, 0.01, 0.01, 0.01)
    grid_points: int = 7
    grid_span: float = 0.5


@dataclass
class DisturbanceConfig:
    key: str
    t: float
    index: int
    jump: float
    kind: str = "q"


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    plant: PlantConfig = field(default_factory=PlantConfig)
    nominal: NominalConfig = field(default_factory=NominalConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    disturbances: list[DisturbanceConfig] = field(default_factory=list)

    def to_ini(self) -> str:
        """Round-trippable text form."""
        lines = []
        for sec in ("plant", "nominal", "gp", "excitation", "controller", "reference", "sim", "analysis"):
            obj = getattr(self, sec)
            lines.append(f"[{sec}]")
            for f in dataclasses.fields(obj):
                val = getattr(obj, f.name)
                if sec == "plant" and f.name == "params":
                    lines += [f"{k} = {v!r}" for k, v in val.items()]
                    continue
                lines.append(f"{f.name} = {val!r}")
            lines.append("")
        lines.append("[disturbances]")
        for d in self.disturbances:
            lines.append(f"{d.key} = {(d.t, d.index, d.jump, d.kind)!r}")
        return "\n".join(lines) + "\n"


_SECTIONS = {
    "nominal": NominalConfig,
    "gp": GpConfig,
    "excitation": ExcitationConfig,
    "controller": ControllerConfig,
    "reference": ReferenceConfig,
    "sim": SimConfig,
    "analysis": AnalysisConfig,
}


def _apply(cfg: ScenarioConfig, section: str, key: str, value: Any) -> None:
    if section == "plant":
        if key == "model":
            cfg.plant.model = str(value)
        else:
            cfg.plant.params[key] = float(value)
        return
    if section == "disturbances":
        cfg.disturbances = [d for d in cfg.disturbances if d.key != key]
        cfg.disturbances.append(_disturbance(key, value))
        return
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(names)}")
    setattr(obj, key, value)


def _disturbance(key: str, value: Any) -> DisturbanceConfig:
    if not isinstance(value, (tuple, list)) or len(value) not in (3, 4):
        raise ConfigError(f"disturbance {key!r} must be (t, index, jump[, kind])")
    t, idx, jump = value[:3]
    kind = value[3] if len(value) == 4 else "q"
    return DisturbanceConfig(key, float(t), int(idx), float(jump), str(kind))


def _validate(cfg: ScenarioConfig) -> None:
    if cfg.controller.kind not in ("eic", "peic", "neic"):
        raise ConfigError(f"controller.kind must be eic, peic or neic, got {cfg.controller.kind!r}")
    if cfg.sim.plant not in ("true", "gp"):
        raise ConfigError("sim.plant must be 'true' or 'gp'")
    if not cfg.reference.terms:
        raise ConfigError("[reference] terms is required")
    if cfg.sim.control_rate <= 0 or cfg.sim.t_end <= 0:
        raise ConfigError("sim.control_rate and sim.t_end must be positive")
    for d in cfg.disturbances:
        if not 0 <= d.t <= cfg.sim.t_end:
            raise ConfigError(f"disturbance time {d.t} outside [0, {cfg.sim.t_end}]")


def parse_override(text: str) -> tuple[str, str, Any]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section, key, parse_value(rhs)


def load_scenario_text(text: str, name: str = "scenario", overrides: Sequence[str] | None = ()) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    cfg = ScenarioConfig(name=name)
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, parse_value(raw))
    for ov in overrides or ():
        section, key, value = parse_override(ov)
        _apply(cfg, section, key, value)
    _validate(cfg)
    return cfg


def shipped_scenarios() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files(SCENARIO_PACKAGE).iterdir() if p.name.endswith(".ini"))


def resolve_scenario(spec: str | Path) -> tuple[str, str]:
    """Return ``(name, text)`` for a file path or the name of a shipped scenario."""
    path = Path(spec)
    if path.is_file():
        return path.stem, path.read_text()
    name = str(spec)[:-4] if str(spec).endswith(".ini") else str(spec)
    res = resources.files(SCENARIO_PACKAGE) / f"{name}.ini"
    if res.is_file():
        return name, res.read_text()
    raise ConfigError(f"scenario {spec!r} is neither a file nor one of {shipped_scenarios()}")


def load_scenario(spec: str | Path, overrides: Sequence[str] | None = ()) -> ScenarioConfig:
    name, text = resolve_scenario(spec)
    return load_scenario_text(text, name, overrides)
