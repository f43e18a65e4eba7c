"""Discrete-time crossing world: ego kinematics, pedestrians, visibility, collisions.

The ego drives along the x axis (lateral coordinate 0). Pedestrians appear at
``ped_spawn_point`` and walk towards negative y at constant speed. Two
rollout engines share these semantics:

* ``"kernel"`` runs the compiled rollout in :mod:`occsafe.kernels` and is
  used for every built-in controller;
* ``"python"`` steps the objects below one at a time and accepts any
  controller, including plain callables.

For built-in controllers both engines produce identical trajectories.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import kernels as K
from .config import ConfigError, ScenarioConfig
from .sampling import trial_spawn_steps

if TYPE_CHECKING:
    from .controllers import Controller

TRAJECTORY_HEADER = ("t", "p", "v", "u", "n_visible", "min_dist")
DIAGNOSTICS_HEADER = ("t", "psi", "dpsi_dp", "dpsi_dv", "a", "b", "u_nom", "u_out", "active", "relaxed")


@dataclass(frozen=True)
class VehicleState:
    p: float
    v: float


@dataclass
class Pedestrian:
    id: int
    x: float
    y: float
    speed: float
    spawn_step: int
    active: bool = True


@dataclass
class SpawnSchedule:
    """Pre-drawn spawn steps of one trial and the index of the next arrival."""

    steps: np.ndarray
    next: int = 0


def world_vector(config: ScenarioConfig) -> np.ndarray:
    """Pack a scenario into the flat parameter vector read by the kernels."""
    w = np.zeros(K.W_SIZE)
    w[K.W_DT] = config.dt
    w[K.W_DMIN] = config.d_min
    w[K.W_SAFE_DIST] = config.safe_dist
    w[K.W_PED_X], w[K.W_PED_Y0] = config.ped_spawn_point
    w[K.W_PED_SPEED] = config.ped_speed
    w[K.W_DESPAWN] = config.ped_despawn_y
    w[K.W_VIS_RULE] = K.VIS_RECT if config.visibility_rule == "rectangular" else K.VIS_LOS
    w[K.W_VIS_PMIN] = config.visibility_window.p_min
    w[K.W_VIS_PMAX] = config.visibility_window.p_max
    w[K.W_VIS_HALF] = config.visibility_window.half_width
    w[K.W_OCC_CX], w[K.W_OCC_CY] = config.occluder.center
    w[K.W_OCC_HX], w[K.W_OCC_HY] = config.occluder.half_extents
    w[K.W_UMIN], w[K.W_UMAX] = config.u_bounds
    w[K.W_EDECEL] = config.emergency_decel
    return w


def n_steps_for(horizon: float, dt: float) -> int:
    return int(round(horizon / dt))


# ---------------------------------------------------------------------------
# world operations


def step_vehicle(state: VehicleState, u: float, dt: float) -> VehicleState:
    """Implicit Euler step: speed first (floored at zero), then position."""
    v = state.v + u * dt
    if v < 0.0:
        v = 0.0
    return VehicleState(state.p + v * dt, v)


def spawn_and_step_pedestrians(
    peds: list[Pedestrian], schedule: SpawnSchedule, k: int, config: ScenarioConfig
) -> list[Pedestrian]:
    """Pedestrians at step ``k``: admit due arrivals, move everyone, retire the gone.

    Positions are computed from the spawn step, y = y0 - speed * (k - k_spawn) * dt,
    which is the per-step decrement without accumulated rounding.
    """
    x0, y0 = config.ped_spawn_point
    while schedule.next < len(schedule.steps) and schedule.steps[schedule.next] <= k:
        ks = int(schedule.steps[schedule.next])
        peds.append(Pedestrian(id=schedule.next, x=x0, y=y0, speed=config.ped_speed, spawn_step=ks))
        schedule.next += 1
    for ped in peds:
        if not ped.active:
            continue
        ped.y = y0 - ped.speed * ((k - ped.spawn_step) * config.dt)
        if ped.y < config.ped_despawn_y:
            ped.active = False
    return peds


def segment_hits_rect(a: tuple[float, float], b: tuple[float, float], center, half) -> bool:
    """Whether segment a-b touches the closed axis-aligned box (Liang-Barsky)."""
    x0, y0 = a
    dx, dy = b[0] - x0, b[1] - y0
    t0, t1 = 0.0, 1.0
    for pp, qq in (
        (-dx, x0 - (center[0] - half[0])),
        (dx, (center[0] + half[0]) - x0),
        (-dy, y0 - (center[1] - half[1])),
        (dy, (center[1] + half[1]) - y0),
    ):
        if pp == 0.0:
            if qq < 0.0:
                return False
            continue
        r = qq / pp
        if pp < 0.0:
            if r > t1:
                return False
            t0 = max(t0, r)
        else:
            if r < t0:
                return False
            t1 = min(t1, r)
    return True


def is_visible(state: VehicleState, ped: Pedestrian, config: ScenarioConfig) -> bool:
    if config.visibility_rule == "rectangular":
        win = config.visibility_window
        return win.p_min < state.p < win.p_max and ped.y - win.half_width < 0.0 < ped.y + win.half_width
    return not segment_hits_rect((state.p, 0.0), (ped.x, ped.y), config.occluder.center, config.occluder.half_extents)


def visible_pedestrians(state: VehicleState, peds: Sequence[Pedestrian], config: ScenarioConfig) -> list[Pedestrian]:
    return [p for p in peds if p.active and is_visible(state, p, config)]


def distance(state: VehicleState, ped: Pedestrian) -> float:
    return math.sqrt((state.p - ped.x) * (state.p - ped.x) + ped.y * ped.y)


def check_collision(state: VehicleState, peds: Sequence[Pedestrian], d_min: float) -> bool:
    return any(p.active and distance(state, p) < d_min for p in peds)


def can_stop_short(state: VehicleState, config: ScenarioConfig) -> bool:
    """Whether braking at ``emergency_decel`` halts the ego before the conflict zone."""
    px = config.ped_spawn_point[0]
    return state.p + state.v * state.v / (2.0 * config.emergency_decel) <= px - config.d_min


def clear_time(p: float, v: float, target: float, accel: float) -> float:
    """Time for the ego to reach ``target`` from (p, v) under constant ``accel`` >= 0."""
    dist = target - p
    if dist <= 0.0:
        return 0.0
    if accel > 0.0:
        return (math.sqrt(v * v + 2.0 * accel * dist) - v) / accel
    if v > 0.0:
        return dist / v
    return math.inf


def is_threat(state: VehicleState, ped: Pedestrian, config: ScenarioConfig, accel: float,
              margin: float | None = None) -> bool:
    """Whether ``ped`` may reach the lane band before the ego clears the crossing.

    The ego is credited with constant acceleration ``accel`` (0: holds its
    speed); the band is widened by ``margin`` (default ``config.threat_margin``)
    on the near side and the ego must get ``margin`` beyond the far edge.
    """
    px, d_min = config.ped_spawn_point[0], config.d_min
    if margin is None:
        margin = config.threat_margin
    if state.p >= px + d_min or ped.y <= -d_min:
        return False
    entry = ped.y - d_min - margin
    if entry <= 0.0:
        t_ped = 0.0
    elif ped.speed > 0.0:
        t_ped = entry / ped.speed
    else:
        return False
    return t_ped < clear_time(state.p, state.v, px + d_min + margin, accel)


# ---------------------------------------------------------------------------
# results


@dataclass
class Trajectory:
    """Per-step record; row k is the state at step k and the command applied from it.

    The final row holds the terminal state; its command columns are NaN.
    """

    rec: np.ndarray

    def __len__(self) -> int:
        return self.rec.shape[0]

    def column(self, idx: int) -> np.ndarray:
        return self.rec[:, idx]

    t = property(lambda self: self.rec[:, K.R_T])
    p = property(lambda self: self.rec[:, K.R_P])
    v = property(lambda self: self.rec[:, K.R_V])
    u = property(lambda self: self.rec[:, K.R_U])
    n_visible = property(lambda self: self.rec[:, K.R_NVIS])
    min_dist = property(lambda self: self.rec[:, K.R_MIND])
    psi = property(lambda self: self.rec[:, K.R_PSI])
    emergency = property(lambda self: self.rec[:, K.R_EMERG])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for r in self.rec:
                w.writerow([_num(r[K.R_T]), _num(r[K.R_P]), _num(r[K.R_V]), _num(r[K.R_U]),
                            int(r[K.R_NVIS]), _num(r[K.R_MIND])])

    def diagnostics_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIAGNOSTICS_HEADER)
            for r in self.rec[:-1]:
                w.writerow([_num(r[K.R_T]), _num(r[K.R_PSI]), _num(r[K.R_GP]), _num(r[K.R_GV]), _num(r[K.R_A]),
                            _num(r[K.R_B]), _num(r[K.R_UNOM]), _num(r[K.R_U]), int(r[K.R_ACTIVE]),
                            int(r[K.R_RELAXED])])


def _num(x: float) -> str:
    return repr(float(x))


@dataclass
class TrialResult:
    safe: int
    traveling_time: float
    min_distance: float
    collision_time: float | None
    trajectory: Trajectory | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# rollout


def run_trial(
    config: ScenarioConfig,
    controller: "Controller | Callable",
    horizon: float,
    seed: int,
    p0: float,
    v0: float,
    *,
    trial: int = 0,
    spawn: np.ndarray | None = None,
    engine: str = "auto",
) -> TrialResult:
    """Roll out one trial from (p0, v0) until collision, passing ``safe_dist`` or ``horizon``.

    The pedestrian schedule is drawn from ``(seed, trial)`` unless ``spawn``
    (sorted spawn steps) is given. ``controller`` is a built-in
    :class:`~occsafe.controllers.Controller` or any callable mapping an
    :class:`~occsafe.controllers.Observation` to an acceleration.
    """
    from .controllers import as_controller

    config.validate()
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    ctrl = as_controller(controller)
    if spawn is None:
        spawn = trial_spawn_steps(config, seed, trial, horizon)
    spawn = np.asarray(spawn, dtype=np.int64)
    n_steps = n_steps_for(horizon, config.dt)
    if engine == "auto":
        engine = "kernel" if ctrl.kernel_vector(config) is not None else "python"
    if engine == "kernel":
        vec = ctrl.kernel_vector(config)
        if vec is None:
            raise ValueError(f"controller {ctrl.name!r} has no kernel form; use engine='python'")
        p_axis, v_axis, values = ctrl.kernel_table()
        safe, t, d, rec = K.rollout_record(p0, v0, ctrl.v_target, spawn, n_steps, world_vector(config), vec,
                                           p_axis, v_axis, values)
    elif engine == "python":
        safe, t, d, rec = _rollout_python(config, ctrl, spawn, n_steps, p0, v0)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return TrialResult(
        safe=int(safe),
        traveling_time=float(t),
        min_distance=float(d),
        collision_time=None if safe else float(t),
        trajectory=Trajectory(rec),
    )


def _rollout_python(config: ScenarioConfig, ctrl: "Controller", spawn: np.ndarray, n_steps: int, p0: float, v0: float):
    from .controllers import Observation

    dt = config.dt
    u_min, u_max = config.u_bounds
    px = config.ped_spawn_point[0]
    layer = ctrl.emergency
    rec = np.full((n_steps + 1, K.R_SIZE), np.nan)
    state = VehicleState(float(p0), float(v0))
    schedule = SpawnSchedule(spawn)
    peds: list[Pedestrian] = []
    latched = False
    min_dist = math.inf
    ctrl.reset()
    for k in range(n_steps + 1):
        t = k * dt
        spawn_and_step_pedestrians(peds, schedule, k, config)
        active = [p for p in peds if p.active]
        d_step = min((distance(state, p) for p in active), default=math.inf)
        min_dist = min(min_dist, d_step)
        visible = visible_pedestrians(state, active, config)
        rec[k, [K.R_T, K.R_P, K.R_V, K.R_NVIS, K.R_MIND]] = (t, state.p, state.v, len(visible), d_step)
        if d_step < config.d_min:
            return 0, t, min_dist, rec[: k + 1]
        if state.p >= config.safe_dist or k == n_steps:
            return 1, t, min_dist, rec[: k + 1]
        diag = np.zeros(7)
        u = float(ctrl.command(Observation(t=t, k=k, state=state, visible=visible, config=config), diag))
        stoppable = can_stop_short(state, config)
        brake = False
        if layer.mode in ("visible", "latch"):
            brake = bool(visible)
        elif layer.mode in ("threat", "threat_latch"):
            brake = stoppable and any(is_threat(state, p, config, layer.threat_accel, layer.margin) for p in visible)
        if layer.commit and visible and not stoppable and state.p < px + config.d_min:
            u = u_max
        if layer.mode in ("latch", "threat_latch"):
            latched = latched or brake
            brake = latched
        if brake:
            u = min(max(-config.emergency_decel, u_min), u_max)
        rec[k, K.R_U] = u
        rec[k, [K.R_PSI, K.R_GP, K.R_GV, K.R_A, K.R_B, K.R_UNOM, K.R_ACTIVE, K.R_RELAXED]] = (
            diag[0], diag[1], diag[2], diag[2], diag[3], diag[4], diag[5], diag[6])
        rec[k, K.R_EMERG] = 1.0 if brake else 0.0
        state = step_vehicle(state, u, dt)
    raise AssertionError("unreachable")
