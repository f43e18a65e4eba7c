"""Scenario and experiment configuration.

Configs are plain frozen dataclasses. They load from TOML (nested tables map
onto nested dataclasses), accept dotted-key overrides, and reject unknown keys.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class SpawnDistribution:
    """Normal(mean, std^2) truncated to [lower, upper], in seconds.

    ``lower = upper = inf`` disables arrivals entirely.
    """

    mean: float
    std: float
    lower: float
    upper: float

    def validate(self) -> None:
        if not self.lower <= self.upper:
            raise ConfigError(f"spawn bounds out of order: [{self.lower}, {self.upper}]")
        if not self.std > 0:
            raise ConfigError(f"spawn std must be positive, got {self.std}")

    @property
    def disabled(self) -> bool:
        return math.isinf(self.lower) and self.lower > 0

    @classmethod
    def never(cls) -> "SpawnDistribution":
        return cls(mean=0.0, std=1.0, lower=math.inf, upper=math.inf)


@dataclass(frozen=True)
class Rect:
    center: tuple[float, float]
    half_extents: tuple[float, float]

    def validate(self) -> None:
        if min(self.half_extents) <= 0:
            raise ConfigError("occluder half extents must be positive")


@dataclass(frozen=True)
class VisibilityWindow:
    """Rectangular visibility rule: ego position inside (p_min, p_max) and
    pedestrian lateral offset inside (-half_width, half_width)."""

    p_min: float = -10.0
    p_max: float = 0.0
    half_width: float = 6.5


# Default arrival model ("1"), a burstier alternative ("2") and no arrivals ("3").
DISTRIBUTIONS: dict[str, tuple[SpawnDistribution, SpawnDistribution]] = {
    "1": (SpawnDistribution(1.5, 2.5, 0.0, 10.0), SpawnDistribution(6.0, 2.5, 0.0, 15.0)),
    "2": (
        SpawnDistribution(2.5, math.sqrt(13.0), 0.0, 10.0),
        SpawnDistribution(2.5, math.sqrt(13.0), 0.0, 15.0),
    ),
    "3": (SpawnDistribution.never(), SpawnDistribution.never()),
}


@dataclass(frozen=True)
class ScenarioConfig:
    occluder: Rect = Rect((-7.0, 5.0), (2.5, 1.5))
    ped_spawn_point: tuple[float, float] = (0.0, 13.0)
    ped_speed: float = 1.0
    ped_despawn_y: float = -3.0
    first_spawn: SpawnDistribution = DISTRIBUTIONS["1"][0]
    subsequent_spawn: SpawnDistribution = DISTRIBUTIONS["1"][1]
    d_min: float = 2.0
    safe_dist: float = 5.0
    dt: float = 0.05
    visibility_rule: str = "rectangular"
    visibility_window: VisibilityWindow = VisibilityWindow()
    u_bounds: tuple[float, float] = (-6.0, 3.0)
    emergency_decel: float = 3.0
    v_target: float = 8.0
    # lane band widening (m) used when judging whether a pedestrian is a threat
    threat_margin: float = 1.0
    # seconds the arrival process has been running when a trial starts
    arrival_warmup: float = 30.0
    max_rejections: int = 10_000

    def validate(self) -> "ScenarioConfig":
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.d_min > 0:
            raise ConfigError("d_min must be positive")
        u_min, u_max = self.u_bounds
        if not u_min < 0 < u_max:
            raise ConfigError(f"u_bounds must satisfy u_min < 0 < u_max, got {self.u_bounds}")
        if not self.emergency_decel > 0:
            raise ConfigError("emergency_decel must be positive")
        if self.ped_speed < 0:
            raise ConfigError("ped_speed must be non-negative")
        if self.visibility_rule not in ("rectangular", "line-of-sight"):
            raise ConfigError(f"unknown visibility_rule {self.visibility_rule!r}")
        if self.threat_margin < 0:
            raise ConfigError("threat_margin must be non-negative")
        if self.v_target < 0:
            raise ConfigError("v_target must be non-negative")
        if self.arrival_warmup < 0:
            raise ConfigError("arrival_warmup must be non-negative")
        if self.max_rejections < 1:
            raise ConfigError("max_rejections must be >= 1")
        self.occluder.validate()
        self.first_spawn.validate()
        self.subsequent_spawn.validate()
        return self

    @property
    def arrivals_disabled(self) -> bool:
        return self.first_spawn.disabled

    def with_distribution(self, name: str) -> "ScenarioConfig":
        first, subsequent = DISTRIBUTIONS[name]
        return dataclasses.replace(self, first_spawn=first, subsequent_spawn=subsequent)

    def fingerprint(self) -> str:
        return fingerprint(self)


@dataclass(frozen=True)
class PIDGains:
    kp: float = 1.0
    ki: float = 0.1
    kd: float = 0.0
    i_max: float = 2.0


@dataclass(frozen=True)
class PlanningProfile:
    stop_point: float = -6.0
    decel: float = 1.5
    dwell: float = 2.0
    accel: float = 1.5


@dataclass(frozen=True)
class SafeControllerParams:
    epsilon: float = 0.05
    eta: float = 0.2
    dx_probe: float = 2.0
    dv_probe: float = 0.5
    n_probe: int = 50
    horizon: float = 10.0
    mode: str = "table"

    def validate(self) -> "SafeControllerParams":
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 < self.eta <= 1:
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if self.dx_probe <= 0 or self.dv_probe <= 0:
            raise ConfigError("probe steps must be positive")
        if self.mode not in ("table", "online"):
            raise ConfigError(f"unknown safe-controller mode {self.mode!r}")
        if self.n_probe < 1:
            raise ConfigError("n_probe must be >= 1")
        return self


@dataclass(frozen=True)
class ControllerConfig:
    cruise_gain: float = 1.0
    pid: PIDGains = PIDGains()
    worst_case_decel: float = 6.0
    worst_case_pulse: float = 0.25
    planning: PlanningProfile = PlanningProfile()
    safe: SafeControllerParams = SafeControllerParams()
    # Emergency layer of deployed controllers (PID never has one):
    # "threat" brakes for visible threats while a stop short of the crossing is
    # possible and commits to clearing it otherwise; "visible" brakes for any
    # visible pedestrian; "none" disables the layer.
    deployed_emergency: str = "threat"

    def validate(self) -> "ControllerConfig":
        if self.cruise_gain <= 0:
            raise ConfigError("cruise_gain must be positive")
        if self.deployed_emergency not in ("none", "visible", "threat"):
            raise ConfigError(f"unknown deployed_emergency {self.deployed_emergency!r}")
        self.safe.validate()
        return self


@dataclass(frozen=True)
class GridSpec:
    p_min: float = -180.0
    p_max: float = 0.0
    dp: float = 2.0
    v_min: float = 0.0
    v_max: float = 10.0
    dv: float = 0.5

    def axes(self):
        import numpy as np

        if self.dp <= 0 or self.dv <= 0:
            raise ConfigError("grid spacing must be positive")
        if self.p_max < self.p_min or self.v_max < self.v_min:
            raise ConfigError("grid bounds out of order")
        n_p = int(round((self.p_max - self.p_min) / self.dp)) + 1
        n_v = int(round((self.v_max - self.v_min) / self.dv)) + 1
        return (
            self.p_min + self.dp * np.arange(n_p, dtype=np.float64),
            self.v_min + self.dv * np.arange(n_v, dtype=np.float64),
        )


@dataclass(frozen=True)
class RiskConfig:
    horizon: float = 10.0
    n_trials: int = 500
    grid: GridSpec = GridSpec()
    # Emergency rule of the estimation policy: "threat_latch" latches braking on
    # the first visible threat; "latch" on the first visible pedestrian.
    emergency: str = "threat_latch"
    # condition trials on "no visible threat and no collision at t=0"
    condition_on_clear: bool = True
    max_attempts_factor: int = 200

    def validate(self) -> "RiskConfig":
        if self.horizon <= 0:
            raise ConfigError("risk horizon must be positive")
        if self.n_trials < 1:
            raise ConfigError("risk n_trials must be >= 1")
        if self.emergency not in ("latch", "threat_latch"):
            raise ConfigError(f"unknown estimation emergency {self.emergency!r}")
        if self.max_attempts_factor < 1:
            raise ConfigError("max_attempts_factor must be >= 1")
        self.grid.axes()
        return self


@dataclass(frozen=True)
class Setting:
    x_init: float
    v_init: float
    one_minus_eps: float


TABLE_SETTINGS: tuple[Setting, ...] = (
    Setting(-180.0, 5.0, 0.95),
    Setting(-180.0, 2.0, 0.9),
    Setting(-120.0, 6.0, 0.95),
    Setting(-120.0, 3.0, 0.9),
    Setting(-60.0, 2.0, 0.9),
)


METHODS = ("proposed", "worst_case", "planning", "pid", "cruise")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    controllers: ControllerConfig = ControllerConfig()
    risk: RiskConfig = RiskConfig()
    methods: tuple[str, ...] = ("proposed", "worst_case", "planning", "pid")
    settings: tuple[Setting, ...] = TABLE_SETTINGS
    n_trials: int = 50
    t_end: float = 120.0
    table: str = ""
    seed: int = 0
    # When set, nominal controllers hold a positive initial speed instead of
    # tracking scenario.v_target.
    track_initial_speed: bool = False

    def validate(self) -> "ExperimentConfig":
        self.scenario.validate()
        self.controllers.validate()
        self.risk.validate()
        if self.t_end <= 0:
            raise ConfigError("t_end must be positive")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
        for s in self.settings:
            if not 0 < s.one_minus_eps < 1:
                raise ConfigError(f"one_minus_eps must lie in (0, 1), got {s.one_minus_eps}")
            if s.v_init < 0:
                raise ConfigError("v_init must be non-negative")
        return self

    def target_speed(self, v_init: float) -> float:
        if self.track_initial_speed and v_init > 0:
            return v_init
        return self.scenario.v_target


# ---------------------------------------------------------------------------
# dict <-> dataclass plumbing


def _coerce(tp: Any, value: Any, path: str) -> Any:
    if isinstance(tp, str):
        tp = eval(tp, vars(sys.modules[__name__]))  # resolve postponed annotations
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return from_dict(tp, value, path)
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        args = tp.__args__
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: expected a number, got {value!r}") from exc
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from a nested dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(fields[name].type, value, f"{path}.{name}" if path else name)
    if cls is Setting:
        missing = {"x_init", "v_init", "one_minus_eps"} - set(kwargs)
        if missing:
            raise ConfigError(f"{path}: missing {', '.join(sorted(missing))}")
    return cls(**kwargs)


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def fingerprint(scenario: ScenarioConfig) -> str:
    payload = json.dumps(dataclasses.asdict(scenario), sort_keys=True, allow_nan=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def parse_override(text: str) -> tuple[list[str], Any]:
    """Parse ``a.b.c=value``; the value uses TOML syntax, bare words are strings."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    if not key:
        raise ConfigError(f"empty override key: {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))  # deep copy
    for text in overrides or ():
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-table")
        node[keys[-1]] = value
    return data


def load_experiment(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    """Load an experiment config (defaults when ``path`` is None) and apply overrides."""
    base = to_dict(ExperimentConfig())
    if path is not None:
        with open(path, "rb") as fh:
            try:
                user = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        base = _merge(base, user)
    base = apply_overrides(base, overrides)
    if "scenario" in base and isinstance(base["scenario"], dict):
        dist = base["scenario"].pop("distribution", None)
    else:
        dist = None
    cfg = from_dict(ExperimentConfig, base)
    if dist is not None:
        if str(dist) not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {dist!r}; choose from 1, 2, 3")
        cfg = dataclasses.replace(cfg, scenario=cfg.scenario.with_distribution(str(dist)))
    return cfg.validate()


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_scenario(path: str | Path | None = None, overrides=()) -> ScenarioConfig:
    return load_experiment(path, overrides).scenario
