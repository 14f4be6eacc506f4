"""Scenario configuration: TOML files validated against an exported JSON schema."""
from __future__ import annotations

import errno
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

STEP_SECONDS = 5.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TimescaleConfig:
    """Step counts of the four loops; ``delta`` may be "month" for calendar months."""

    dt: float = STEP_SECONDS
    beta: int = 720
    gamma: int = 720
    delta: int | str = "month"
    beta_offset: int = 0
    gamma_offset: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not 1 <= self.beta <= self.gamma:
            raise ConfigError("need 1 <= beta <= gamma")
        if self.delta != "month" and not (isinstance(self.delta, int) and self.delta >= self.gamma):
            raise ConfigError("delta must be 'month' or an integer >= gamma")
        if not 0 <= self.beta_offset < self.beta:
            raise ConfigError("beta_offset must lie in [0, beta)")
        if not 0 <= self.gamma_offset < self.gamma:
            raise ConfigError("gamma_offset must lie in [0, gamma)")


@dataclass(frozen=True)
class DemandConfig:
    kind: str = "load_follow"  # load_follow | seasonal | random_walk | steps | file
    values: tuple = ()  # hourly fractions for "steps"
    path: str | None = None  # CSV of hourly fractions for "file"
    low: float = 0.5
    high: float = 1.0
    noise: float = 0.03


@dataclass(frozen=True)
class PumpConfig:
    K_p0: float = 1.0
    K_s0: float = 1.0
    primary: dict = field(default_factory=dict)  # DegradationParams overrides
    secondary: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FilterConfig:
    enabled: bool = True
    n_members: int = 20
    sigma: float = 1e-15
    sigma_tau: float = 1e-30
    c0_state: float = 1e-8
    c0_param: float = 1e-16
    gamma: tuple = (1e-30,)
    observations: tuple = ("Q_RX",)
    theta_A: tuple | str = "auto"
    inflation: float = 1.5  # spread factor when re-drawing divergent members
    innovation: str = "perturbed"
    localization: str = "none"  # none | block
    prior_inflation: float = 1.0


@dataclass(frozen=True)
class GovernorConfig:
    enabled: bool = True
    horizon: int = 1440
    tol: float = 1e-3
    constraints: tuple = ()  # dicts of var, bound, direction, buffer; empty = defaults
    spread_factor: float = 0.0


@dataclass(frozen=True)
class OperatorConfig:
    enabled: bool = False
    reasoning_intervals: int = 3
    maintenance_at_start: bool = False
    weights: dict = field(default_factory=dict)
    n_samples: int = 400


@dataclass(frozen=True)
class OutputConfig:
    dir: str | None = None
    formats: tuple = ("csv", "json", "svg")
    log_every: int = 1


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    duration_hours: float = 24.0
    start_date: str = "2018-01-01"
    start_power: float = 1.0
    seed: int = 0
    surrogate: str = "original"  # original | shock | path to a checkpoint
    alarms: str = "log"  # log | halt
    timescales: TimescaleConfig = field(default_factory=TimescaleConfig)
    demand: DemandConfig = field(default_factory=DemandConfig)
    pumps: PumpConfig = field(default_factory=PumpConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    governor: GovernorConfig = field(default_factory=GovernorConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    shocks: tuple = ()  # dicts of time_hours, delta_T
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_hours * 3600.0 / self.timescales.dt))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def with_(self, **kw) -> "ScenarioConfig":
        """Copy with top-level or dotted (``"filter.n_members"``) overrides."""
        cfg = self
        for key, value in kw.items():
            if "." in key:
                sec, sub = key.split(".", 1)
                cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **{sub: value})})
            else:
                cfg = replace(cfg, **{key: value})
        return cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SECTION_TYPES = {
    "timescales": TimescaleConfig, "demand": DemandConfig, "pumps": PumpConfig, "filter": FilterConfig,
    "governor": GovernorConfig, "operator": OperatorConfig, "output": OutputConfig,
}


def config_schema() -> dict:
    """JSON schema of a scenario file."""
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "fhrtwin scenario",
        **_obj({
            "name": _STR, "duration_hours": {"type": "number", "exclusiveMinimum": 0}, "start_date": _STR,
            "start_power": {"type": "number", "minimum": 0.5, "maximum": 1.0}, "seed": _INT,
            "surrogate": _STR, "alarms": {"enum": ["log", "halt"]},
            "timescales": _obj({"dt": _NUM, "beta": {"type": "integer", "minimum": 1}, "gamma": _INT,
                                "delta": {"oneOf": [_INT, {"const": "month"}]}, "beta_offset": _INT,
                                "gamma_offset": _INT}),
            "demand": _obj({"kind": {"enum": ["load_follow", "seasonal", "random_walk", "steps", "file"]},
                            "values": {"type": "array", "items": _NUM}, "path": _STR, "low": _NUM, "high": _NUM,
                            "noise": _NUM}),
            "pumps": _obj({"K_p0": {"type": "number", "minimum": 1.0}, "K_s0": {"type": "number", "minimum": 1.0},
                           "primary": {"type": "object"}, "secondary": {"type": "object"}}),
            "filter": _obj({"enabled": _BOOL, "n_members": {"type": "integer", "minimum": 2}, "sigma": _NUM,
                            "sigma_tau": _NUM, "c0_state": _NUM, "c0_param": _NUM,
                            "gamma": {"type": "array", "items": _NUM},
                            "observations": {"type": "array", "items": _STR, "minItems": 1},
                            "theta_A": {"oneOf": [{"const": "auto"}, {"type": "array", "items": _STR}]},
                            "inflation": _NUM, "innovation": {"enum": ["perturbed", "mean"]},
                            "localization": {"enum": ["none", "block"]},
                            "prior_inflation": {"type": "number", "exclusiveMinimum": 0}}),
            "governor": _obj({"enabled": _BOOL, "horizon": {"type": "integer", "minimum": 1}, "tol": _NUM,
                              "constraints": {"type": "array", "items": _obj(
                                  {"var": _STR, "bound": _NUM, "direction": {"enum": ["min", "max"]},
                                   "buffer": _NUM}, ["var", "bound", "direction"])},
                              "spread_factor": _NUM}),
            "operator": _obj({"enabled": _BOOL, "reasoning_intervals": {"type": "integer", "minimum": 1},
                              "maintenance_at_start": _BOOL, "weights": {"type": "object"}, "n_samples": _INT}),
            "shocks": {"type": "array", "items": _obj({"time_hours": _NUM, "delta_T": _NUM},
                                                      ["time_hours", "delta_T"])},
            "output": _obj({"dir": _STR, "formats": {"type": "array", "items": {"enum": ["csv", "json", "svg"]}},
                            "log_every": {"type": "integer", "minimum": 1}}),
        }),
    }


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def config_from_dict(d: dict, base_dir: Path | None = None) -> ScenarioConfig:
    try:
        jsonschema.validate(d, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid scenario at {where}: {exc.message}") from None
    kw = {}
    for key, value in d.items():
        if key in SECTION_TYPES:
            kw[key] = SECTION_TYPES[key](**_tupled(value))
        elif key == "shocks":
            kw[key] = tuple(dict(s) for s in value)
        else:
            kw[key] = value
    if "governor" in kw:
        kw["governor"] = replace(kw["governor"], constraints=tuple(dict(c) for c in kw["governor"].constraints))
    cfg = ScenarioConfig(**kw)
    base_dir = base_dir or Path.cwd()
    if cfg.demand.kind == "file":
        if not cfg.demand.path:
            raise ConfigError("demand kind 'file' needs a path")
        p = Path(cfg.demand.path)
        p = p if p.is_absolute() else base_dir / p
        if not p.exists():
            raise FileNotFoundError(f"demand file not found: {p}")
        cfg = cfg.with_(**{"demand.path": str(p)})
    if cfg.demand.kind == "steps" and not cfg.demand.values:
        raise ConfigError("demand kind 'steps' needs values")
    if cfg.surrogate not in ("original", "shock"):
        p = Path(cfg.surrogate)
        p = p if p.is_absolute() else base_dir / p
        if not p.exists():
            raise FileNotFoundError(f"surrogate checkpoint not found: {p}")
        cfg = cfg.with_(surrogate=str(p))
    return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "scenario file not found", str(path))
    with path.open("rb") as fh:
        try:
            d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(d, path.parent)


def section_names(cls) -> list:
    return [f.name for f in fields(cls)]
