"""Monte Carlo estimation of the safety probability psi(p, v) and its risk table.

psi(p, v) is the fraction of trials, started at position p and speed v, in
which the estimation policy (hold the initial speed, latch emergency braking
on the first visible threat) avoids collision over the horizon. Trials are
conditioned on a clear start: no collision and no visible threat at t = 0.
Tables grid psi over initial states; controllers read them by bilinear
interpolation and central differences.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from . import kernels_np as KN
from .config import ConfigError, GridSpec, RiskConfig, ScenarioConfig
from .controllers import estimation_controller
from .sampling import conditioned_spawn_matrix, derive_seed, spawn_step_matrix
from .world import n_steps_for, run_trial, world_vector

TABLE_FORMAT = "occsafe-risk-table"
TABLE_VERSION = 1
Z95 = 1.959963984540054


class TableError(ValueError):
    """Corrupt, mismatched or unusable risk table."""


class FingerprintWarning(UserWarning):
    """A risk table was built for a different scenario than the one it is used with."""


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for k successes in n trials."""
    if n < 1:
        raise ValueError("wilson interval needs n >= 1")
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    ph = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (ph + z2 / (2 * n)) / denom
    half = z * math.sqrt(ph * (1 - ph) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


# ---------------------------------------------------------------------------
# estimation


def policy_fingerprint(scenario: ScenarioConfig, risk: RiskConfig) -> str:
    """Hash of everything that determines psi: the world (without the deployed
    target speed) and the estimation policy."""
    world = dataclasses.asdict(scenario)
    world.pop("v_target")
    payload = {"scenario": world, "emergency": risk.emergency, "condition_on_clear": risk.condition_on_clear}
    text = json.dumps(payload, sort_keys=True, allow_nan=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _policy_vector(scenario: ScenarioConfig, v0: float, emergency: str) -> np.ndarray:
    return estimation_controller(scenario, v0, emergency).kernel_vector(scenario)


def clear_start_mask(spawn: np.ndarray, p0: float, v0: float, world: np.ndarray, emergency: str,
                     margin: float) -> np.ndarray:
    """Rows of ``spawn`` whose t=0 state has no collision and nothing that would trip the policy."""
    spawned = spawn <= 0
    y = np.where(spawned, KN.ped_y(world, 0, np.where(spawned, spawn, 0)), world[K.W_PED_Y0])
    active = spawned & (y >= world[K.W_DESPAWN])
    px = world[K.W_PED_X]
    hit = active & (np.sqrt((p0 - px) ** 2 + y * y) < world[K.W_DMIN])
    seen = active & KN.visible_mask(np.full(spawn.shape, float(p0)), y, world)
    if emergency == "threat_latch":
        seen &= KN.threat_mask(np.full(spawn.shape, float(p0)), np.full(spawn.shape, float(v0)), y, world, 0.0, margin)
    return ~(hit | seen).any(axis=1)


def estimation_schedules(scenario: ScenarioConfig, risk: RiskConfig, horizon: float, p0: float, v0: float,
                         n_trials: int, seed: int) -> tuple[np.ndarray, int]:
    """Spawn matrix of the trials behind one estimate and the number of schedules drawn."""
    if not risk.condition_on_clear:
        return spawn_step_matrix(scenario, seed, n_trials, horizon), n_trials
    world = world_vector(scenario)
    drawn = [0]

    def accept(m):
        drawn[0] += m.shape[0]
        return clear_start_mask(m, p0, v0, world, risk.emergency, scenario.threat_margin)

    m = conditioned_spawn_matrix(scenario, seed, n_trials, horizon, accept, n_trials * risk.max_attempts_factor)
    return m, drawn[0]


@dataclass(frozen=True)
class SafetyEstimate:
    psi: float
    n_trials: int
    n_safe: int
    wilson_lo: float
    wilson_hi: float
    schedules_drawn: int


def estimate_safety_probability(scenario: ScenarioConfig, horizon: float, p0: float, v0: float, n_trials: int,
                                seed: int, risk: RiskConfig | None = None) -> SafetyEstimate:
    """Fraction of safe trials from (p0, v0) under the estimation policy."""
    risk = risk or RiskConfig()
    scenario.validate()
    if isinstance(n_trials, bool) or int(n_trials) != n_trials or n_trials < 1:
        raise ValueError(f"n_trials must be a positive integer, got {n_trials!r}")
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    n_trials = int(n_trials)
    if scenario.arrivals_disabled:
        lo, hi = wilson_interval(n_trials, n_trials)
        return SafetyEstimate(1.0, n_trials, n_trials, lo, hi, n_trials)
    spawn, drawn = estimation_schedules(scenario, risk, horizon, p0, v0, n_trials, seed)
    safe, _, _ = K.rollout_batch(
        np.full(n_trials, float(p0)), np.full(n_trials, float(v0)), np.full(n_trials, float(v0)), spawn,
        n_steps_for(horizon, scenario.dt), world_vector(scenario), _policy_vector(scenario, v0, risk.emergency),
        np.zeros(1), np.zeros(1), np.ones((1, 1)),
    )
    k = int(safe.sum())
    lo, hi = wilson_interval(k, n_trials)
    return SafetyEstimate(k / n_trials, n_trials, k, lo, hi, drawn)


def ego_safety(scenario: ScenarioConfig, horizon: float, p0: float, v0: float, seed: int, trial: int = 0,
               emergency: str = "threat_latch") -> int:
    """Safe flag of a single unconditioned trial under the estimation policy."""
    ctrl = estimation_controller(scenario, v0, emergency)
    return run_trial(scenario, ctrl, horizon, seed, p0, v0, trial=trial).safe


# ---------------------------------------------------------------------------
# tables


@dataclass
class RiskTable:
    p_axis: np.ndarray
    v_axis: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p_axis = np.asarray(self.p_axis, dtype=np.float64)
        self.v_axis = np.asarray(self.v_axis, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()
        for a in (self.p_axis, self.v_axis, self.values):
            a.flags.writeable = False

    def validate(self) -> "RiskTable":
        if self.p_axis.ndim != 1 or self.v_axis.ndim != 1 or self.p_axis.size == 0 or self.v_axis.size == 0:
            raise TableError("table axes must be non-empty vectors")
        if np.any(np.diff(self.p_axis) <= 0) or np.any(np.diff(self.v_axis) <= 0):
            raise TableError("table axes must be strictly increasing")
        if self.values.shape != (self.p_axis.size, self.v_axis.size):
            raise TableError(f"values shape {self.values.shape} does not match axes "
                             f"({self.p_axis.size}, {self.v_axis.size})")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0) or np.any(self.values > 1):
            raise TableError("table values must lie in [0, 1]")
        return self

    @property
    def fingerprint(self) -> str | None:
        return self.meta.get("fingerprint")

    def inside(self, p: float, v: float) -> bool:
        return bool(self.p_axis[0] <= p <= self.p_axis[-1] and self.v_axis[0] <= v <= self.v_axis[-1])

    def psi(self, p: float, v: float) -> float:
        return float(K.bilinear(self.p_axis, self.v_axis, self.values, p, v))

    def lookup(self, p: float, v: float) -> tuple[float, bool]:
        """Bilinear psi at (p, v) and whether the query was clamped to the grid box."""
        return self.psi(p, v), not self.inside(p, v)

    def equals(self, other: "RiskTable") -> bool:
        return (np.array_equal(self.p_axis, other.p_axis) and np.array_equal(self.v_axis, other.v_axis)
                and np.array_equal(self.values, other.values) and self.meta == other.meta)

    def check_fingerprint(self, scenario: ScenarioConfig, risk: RiskConfig | None = None, strict: bool = False) -> bool:
        """Compare the table's fingerprint with ``scenario``; warn (or raise if strict) on mismatch."""
        want = policy_fingerprint(scenario, risk or RiskConfig())
        if self.fingerprint == want:
            return True
        msg = f"risk table fingerprint {self.fingerprint} does not match scenario fingerprint {want}"
        if strict:
            raise TableError(msg)
        warnings.warn(msg, FingerprintWarning, stacklevel=2)
        return False


def lookup(table: RiskTable, p: float, v: float) -> tuple[float, bool]:
    return table.lookup(p, v)


def _row_task(args):
    scenario, risk, horizon, p, v_axis, n_trials, seeds = args
    return [estimate_safety_probability(scenario, horizon, p, v, n_trials, s, risk).psi for v, s in zip(v_axis, seeds)]


def build_risk_table(scenario: ScenarioConfig, grid: GridSpec | None = None, n_trials: int | None = None,
                     horizon: float | None = None, seed: int = 0, risk: RiskConfig | None = None,
                     workers: int = 1) -> RiskTable:
    """Estimate psi on every grid cell; cell (i, j) uses seed ``derive_seed(seed, i, j)``.

    Rows run in parallel over ``workers`` processes; the result does not
    depend on the worker count.
    """
    risk = (risk or RiskConfig()).validate()
    scenario.validate()
    grid = grid or risk.grid
    n_trials = risk.n_trials if n_trials is None else n_trials
    horizon = risk.horizon if horizon is None else horizon
    p_axis, v_axis = grid.axes()
    tasks = [
        (scenario, risk, horizon, float(p), v_axis.tolist(), n_trials, [derive_seed(seed, i, j) for j in range(v_axis.size)])
        for i, p in enumerate(p_axis)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_row_task, tasks))
    else:
        rows = [_row_task(t) for t in tasks]
    meta = {
        "n_trials": int(n_trials),
        "horizon": float(horizon),
        "seed": int(seed),
        "fingerprint": policy_fingerprint(scenario, risk),
        "emergency": risk.emergency,
        "condition_on_clear": risk.condition_on_clear,
        "beyond_safe_dist": bool(p_axis[-1] >= scenario.safe_dist),
    }
    if meta["beyond_safe_dist"]:
        warnings.warn("grid covers positions at or past safe_dist; psi is trivially 1 there", stacklevel=2)
    return RiskTable(p_axis, v_axis, np.array(rows, dtype=np.float64), meta)


# ---------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class GradientEstimate:
    dpsi_dp: float
    dpsi_dv: float
    dx: float
    dv: float
    psi: float

    def __post_init__(self):
        if not (math.isfinite(self.dpsi_dp) and math.isfinite(self.dpsi_dv)):
            raise ValueError("gradient must be finite")
        if not (self.dx > 0 and self.dv > 0):
            raise ValueError("probe steps must be positive")


class OnlineEstimator:
    """psi evaluated by fresh Monte Carlo at the query state (no table).

    All probes share ``seed``, so differences between nearby states are not
    swamped by sampling noise.
    """

    def __init__(self, scenario: ScenarioConfig, horizon: float, n_trials: int, seed: int, dx: float = 2.0,
                 dv: float = 0.5, risk: RiskConfig | None = None):
        self.scenario, self.horizon, self.n_trials, self.seed = scenario, horizon, n_trials, seed
        self.dx, self.dv = dx, dv
        self.risk = risk or RiskConfig()

    def psi(self, p: float, v: float) -> float:
        return estimate_safety_probability(self.scenario, self.horizon, p, max(v, 0.0), self.n_trials, self.seed,
                                           self.risk).psi

    def __call__(self, p: float, v: float) -> tuple[float, float, float]:
        g = gradient(self, p, v, self.dx, self.dv)
        return g.psi, g.dpsi_dp, g.dpsi_dv


def gradient(source, p: float, v: float, dx: float, dv: float) -> GradientEstimate:
    """Central-difference gradient of psi from a table or an online estimator."""
    if not (dx > 0 and dv > 0):
        raise ValueError("probe steps must be positive")
    probes = ((p + dx, v), (p - dx, v), (p, v + dv), (p, v - dv))
    if isinstance(source, RiskTable):
        if not any(source.inside(a, b) for a, b in probes):
            raise TableError(f"all gradient probes around ({p}, {v}) fall outside the table; build a larger grid")
        f = source.psi
    else:
        f = source.psi
    pp, pm, vp, vm = (f(a, b) for a, b in probes)
    return GradientEstimate((pp - pm) / (2 * dx), (vp - vm) / (2 * dv), dx, dv, f(p, v))


# ---------------------------------------------------------------------------
# persistence


def _payload(table: RiskTable) -> dict:
    return {
        "format": TABLE_FORMAT,
        "version": TABLE_VERSION,
        "meta": table.meta,
        "p_axis": table.p_axis.tolist(),
        "v_axis": table.v_axis.tolist(),
        "values": table.values.tolist(),
    }


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def dumps_table(table: RiskTable) -> str:
    payload = _payload(table)
    payload["checksum"] = _checksum(payload)
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def save_table(table: RiskTable, path) -> Path:
    """Write atomically: a crash leaves either the old file or the complete new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(dumps_table(table))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_table(path, scenario: ScenarioConfig | None = None, risk: RiskConfig | None = None) -> RiskTable:
    """Read a table; when ``scenario`` is given, warn if it was built for another world."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TableError(f"cannot read risk table {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TableError(f"{path}: not a valid risk table file ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != TABLE_FORMAT:
        raise TableError(f"{path}: not a risk table file")
    if payload.get("version") != TABLE_VERSION:
        raise TableError(f"{path}: table version {payload.get('version')!r}, expected {TABLE_VERSION}")
    checksum = payload.pop("checksum", None)
    if checksum != _checksum(payload):
        raise TableError(f"{path}: checksum mismatch, file is corrupt")
    table = RiskTable(payload["p_axis"], payload["v_axis"], payload["values"], payload["meta"])
    if scenario is not None:
        table.check_fingerprint(scenario, risk)
    return table


def export_csv(table: RiskTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("p", "v", "psi"))
        for i, p in enumerate(table.p_axis):
            for j, v in enumerate(table.v_axis):
                w.writerow((repr(float(p)), repr(float(v)), repr(float(table.values[i, j]))))
