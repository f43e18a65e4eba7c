"""Longitudinal controllers and the probabilistic safety filter.

Every controller maps an :class:`Observation` to an acceleration. Built-in
controllers also expose a flat parameter vector so the compiled rollout can
run them; the Python ``command`` methods use the same arithmetic step for step.

The safety filter keeps the estimated safety probability ``psi(p, v)`` above
``1 - eps``. With the ego dynamics p' = v, v' = u it imposes

    dpsi/dv * u >= -eta * (psi - (1 - eps)) - dpsi/dp * v

and picks the admissible command closest to the nominal one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import kernels as K
from .config import ConfigError, ControllerConfig, ExperimentConfig, ScenarioConfig

EMERGENCY_CODES = {
    "none": K.EMERGENCY_NONE,
    "visible": K.EMERGENCY_VISIBLE,
    "latch": K.EMERGENCY_LATCH,
    "threat": K.EMERGENCY_THREAT,
    "threat_latch": K.EMERGENCY_THREAT_LATCH,
}

RELAX_NONE = 0
RELAX_EPSILON = K.QP_RELAX_ETA + 1
RELAX_FALLBACK = K.QP_RELAX_ETA + 2


class InfeasibleQP(ValueError):
    """No command within the bounds satisfies the safety constraint."""


class TableLike(Protocol):
    p_axis: np.ndarray
    v_axis: np.ndarray
    values: np.ndarray


@dataclass
class Observation:
    t: float
    k: int
    state: "object"  # world.VehicleState
    visible: Sequence = ()
    config: ScenarioConfig | None = None


# ---------------------------------------------------------------------------
# nominal control laws


def nominal_cruise(v: float, v_target: float, gain: float, u_bounds: tuple[float, float]) -> float:
    """Proportional speed tracking, saturated to the acceleration bounds."""
    return float(K.clamp(gain * (v_target - v), u_bounds[0], u_bounds[1]))


@dataclass(frozen=True)
class PIDState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_velocity(
    state: PIDState, v: float, v_target: float, kp: float, ki: float, kd: float, i_max: float, dt: float,
    u_bounds: tuple[float, float],
) -> tuple[float, PIDState]:
    """Speed PID with a clamped integrator; the derivative term starts on the second call."""
    err = v_target - v
    integ = float(K.clamp(state.integral + err * dt, -i_max, i_max))
    deriv = 0.0 if state.prev_error is None else (err - state.prev_error) / dt
    u = float(K.clamp(kp * err + ki * integ + kd * deriv, u_bounds[0], u_bounds[1]))
    return u, PIDState(integ, err)


def required_decel(p: float, v: float, x_stop: float) -> float:
    """Constant deceleration that halts the ego exactly at ``x_stop``."""
    gap = x_stop - p
    if v <= 0.0:
        return 0.0
    if gap <= 0.0:
        return math.inf
    return v * v / (2.0 * gap)


# ---------------------------------------------------------------------------
# safety constraint


@dataclass(frozen=True)
class ConstraintInstance:
    """Half-line a * u >= b on the command."""

    a: float
    b: float

    def satisfied(self, u: float, tol: float = 1e-9) -> bool:
        return self.a * u >= self.b - tol


def synthesize_constraint(psi: float, dpsi_dp: float, dpsi_dv: float, v: float, eps: float, eta: float) -> ConstraintInstance:
    for name, x in (("psi", psi), ("dpsi_dp", dpsi_dp), ("dpsi_dv", dpsi_dv), ("v", v)):
        if not math.isfinite(x):
            raise ValueError(f"{name} must be finite, got {x}")
    return ConstraintInstance(float(dpsi_dv), float(K.constraint_rhs(psi, dpsi_dp, v, eps, eta)))


def solve_safe_qp(c: ConstraintInstance, u_nom: float, u_bounds: tuple[float, float]) -> float:
    """Closest command to ``u_nom`` inside the bounds that satisfies ``c``."""
    u, ok = K.solve_qp(c.a, c.b, u_bounds[0], u_bounds[1], u_nom)
    if not ok:
        raise InfeasibleQP(f"no u in [{u_bounds[0]}, {u_bounds[1]}] with {c.a} * u >= {c.b}")
    return float(u)


@dataclass(frozen=True)
class SafeStep:
    u: float
    b: float
    relaxed: int  # 0 none, 1..3 eta halvings, 4 epsilon doubled, 5 fallback to u_min


def safe_control_step(
    psi: float, dpsi_dp: float, dpsi_dv: float, v: float, u_nom: float, eps: float, eta: float,
    u_bounds: tuple[float, float],
) -> SafeStep:
    """Filter ``u_nom``. When infeasible, halve eta (up to three times), then
    double eps, then fall back to full braking."""
    synthesize_constraint(psi, dpsi_dp, dpsi_dv, v, eps, eta)
    u, b, relaxed = K.safe_filter(psi, dpsi_dp, dpsi_dv, v, u_nom, eps, eta, u_bounds[0], u_bounds[1])
    return SafeStep(float(u), float(b), int(relaxed))


# ---------------------------------------------------------------------------
# controller objects


@dataclass(frozen=True)
class EmergencyLayer:
    """Rule-based braking applied on top of a controller's command.

    ``mode``: none, visible, latch, threat, threat_latch (see :mod:`occsafe.kernels`).
    ``commit``: once a stop short of the crossing is impossible and a
    pedestrian is in view, accelerate through it. ``threat_accel``: acceleration credited to the ego when judging
    whether a pedestrian is a threat. ``margin``: lane band widening in metres.
    """

    mode: str = "none"
    commit: bool = False
    threat_accel: float = 0.0
    margin: float = 1.0

    def __post_init__(self):
        if self.mode not in EMERGENCY_CODES:
            raise ConfigError(f"unknown emergency mode {self.mode!r}")

    @property
    def code(self) -> int:
        return EMERGENCY_CODES[self.mode]


_EMPTY_AXIS = np.zeros(1)
_EMPTY_VALUES = np.ones((1, 1))


class Controller:
    """Base class; subclasses set ``kind`` and implement ``command``."""

    name = "controller"
    kind: int | None = None

    def __init__(self, v_target: float, u_bounds: tuple[float, float], dt: float, emergency: EmergencyLayer | None = None,
                 gain: float = 1.0):
        self.v_target = float(v_target)
        self.u_bounds = (float(u_bounds[0]), float(u_bounds[1]))
        self.dt = float(dt)
        self.gain = float(gain)
        self.emergency = emergency or EmergencyLayer()

    def reset(self) -> None:
        pass

    def command(self, obs: Observation, diag: np.ndarray) -> float:
        raise NotImplementedError

    def __call__(self, obs: Observation) -> float:
        return self.command(obs, np.zeros(7))

    def _vector(self) -> np.ndarray:
        c = np.zeros(K.C_SIZE)
        c[K.C_KIND] = self.kind
        c[K.C_EMERGENCY] = self.emergency.code
        c[K.C_GAIN] = self.gain
        c[K.C_MARGIN] = self.emergency.margin
        c[K.C_THREAT_ACCEL] = self.emergency.threat_accel
        c[K.C_COMMIT] = 1.0 if self.emergency.commit else 0.0
        return c

    def kernel_vector(self, config: ScenarioConfig) -> np.ndarray | None:
        if self.kind is None:
            return None
        return self._vector()

    def kernel_table(self):
        return _EMPTY_AXIS, _EMPTY_AXIS, _EMPTY_VALUES


class CruiseController(Controller):
    name = "cruise"
    kind = K.KIND_CRUISE

    def command(self, obs, diag):
        return nominal_cruise(obs.state.v, self.v_target, self.gain, self.u_bounds)


class PIDController(Controller):
    name = "pid"
    kind = K.KIND_PID

    def __init__(self, v_target, u_bounds, dt, kp=1.0, ki=0.1, kd=0.0, i_max=2.0, emergency=None):
        super().__init__(v_target, u_bounds, dt, emergency)
        self.kp, self.ki, self.kd, self.i_max = kp, ki, kd, i_max
        self.state = PIDState()

    def reset(self):
        self.state = PIDState()

    def command(self, obs, diag):
        u, self.state = pid_velocity(self.state, obs.state.v, self.v_target, self.kp, self.ki, self.kd, self.i_max,
                                     self.dt, self.u_bounds)
        return u

    def _vector(self):
        c = super()._vector()
        c[K.C_KP], c[K.C_KI], c[K.C_KD], c[K.C_IMAX] = self.kp, self.ki, self.kd, self.i_max
        return c


class _TableController(Controller):
    def __init__(self, *args, table: TableLike, **kwargs):
        super().__init__(*args, **kwargs)
        self.table = table

    def psi(self, p: float, v: float) -> float:
        t = self.table
        return float(K.bilinear(t.p_axis, t.v_axis, t.values, p, v))

    def kernel_table(self):
        t = self.table
        return (np.ascontiguousarray(t.p_axis, dtype=np.float64), np.ascontiguousarray(t.v_axis, dtype=np.float64),
                np.ascontiguousarray(t.values, dtype=np.float64))


class WorstCaseController(_TableController):
    """Cruise, but brake hard for ``pulse`` seconds whenever the table reports any risk."""

    name = "worst_case"
    kind = K.KIND_WORST

    def __init__(self, v_target, u_bounds, dt, table, decel=6.0, pulse=0.25, emergency=None, gain=1.0):
        super().__init__(v_target, u_bounds, dt, emergency, gain, table=table)
        self.decel = float(decel)
        self.pulse_steps = int(round(pulse / dt))
        self.timer = 0

    def reset(self):
        self.timer = 0

    def command(self, obs, diag):
        psi = self.psi(obs.state.p, obs.state.v)
        diag[0] = psi
        if psi < 1.0:
            self.timer = self.pulse_steps
        if self.timer > 0:
            self.timer -= 1
            diag[5] = 1.0
            return float(K.clamp(-self.decel, *self.u_bounds))
        return nominal_cruise(obs.state.v, self.v_target, self.gain, self.u_bounds)

    def _vector(self):
        c = super()._vector()
        c[K.C_WC_DECEL] = self.decel
        c[K.C_WC_STEPS] = self.pulse_steps
        return c


class PlanningController(Controller):
    """Stop-and-go plan: brake along a constant-deceleration curve to a stop
    point before the crossing, dwell, then accelerate back to the target speed."""

    name = "planning"
    kind = K.KIND_PLANNING

    def __init__(self, v_target, u_bounds, dt, stop_point=-6.0, decel=1.5, dwell=2.0, accel=1.5, emergency=None,
                 gain=1.0):
        super().__init__(v_target, u_bounds, dt, emergency, gain)
        self.stop_point, self.decel, self.accel = float(stop_point), float(decel), float(accel)
        self.dwell_steps = int(round(dwell / dt))
        self.reset()

    def reset(self):
        self.mem = np.zeros(K.M_SIZE)

    def command(self, obs, diag):
        return float(K.planning_command(obs.state.p, obs.state.v, self.v_target, self._vector(), self.mem,
                                        *self.u_bounds, self.dt))

    def profile_time(self, p0: float, v0: float, end: float) -> float:
        """Traveling time of the undisturbed plan from (p0, v0) to ``end``."""
        from .world import VehicleState, step_vehicle

        self.reset()
        state = VehicleState(p0, v0)
        k = 0
        limit = 10_000_000
        while state.p < end and k < limit:
            u = self.command(Observation(t=k * self.dt, k=k, state=state), np.zeros(7))
            state = step_vehicle(state, u, self.dt)
            k += 1
        self.reset()
        return k * self.dt

    def _vector(self):
        c = super()._vector()
        c[K.C_PL_STOP], c[K.C_PL_DECEL] = self.stop_point, self.decel
        c[K.C_PL_DWELL_STEPS], c[K.C_PL_ACCEL] = self.dwell_steps, self.accel
        return c


class SafeController(_TableController):
    """Cruise command passed through the probability-invariance filter.

    The filter is inactive while psi > 1 - eps. Gradients are central
    differences of the table with steps ``dx``, ``dv``; for ``mode="online"``
    pass ``estimator`` (psi, dpsi_dp, dpsi_dv) = estimator(p, v) instead.
    """

    name = "proposed"
    kind = K.KIND_SAFE

    def __init__(self, v_target, u_bounds, dt, table=None, epsilon=0.05, eta=0.2, dx=2.0, dv=0.5, emergency=None,
                 gain=1.0, estimator: Callable | None = None):
        if table is None and estimator is None:
            raise ValueError("SafeController needs a risk table or an online estimator")
        super().__init__(v_target, u_bounds, dt, emergency, gain, table=table)
        if not 0 < epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
        self.epsilon, self.eta, self.dx, self.dv = float(epsilon), float(eta), float(dx), float(dv)
        self.estimator = estimator
        self.last_step: SafeStep | None = None

    def command(self, obs, diag):
        p, v = obs.state.p, obs.state.v
        u_nom = nominal_cruise(v, self.v_target, self.gain, self.u_bounds)
        if self.estimator is not None:
            psi, gp, gv = self.estimator(p, v)
        else:
            psi = self.psi(p, v)
            gp = gv = None
        diag[0] = psi
        diag[4] = u_nom
        if psi > 1.0 - self.epsilon:
            self.last_step = None
            return u_nom
        if gp is None:
            t = self.table
            gp, gv = K.table_gradient(t.p_axis, t.v_axis, t.values, p, v, self.dx, self.dv)
        step = safe_control_step(psi, gp, gv, v, u_nom, self.epsilon, self.eta, self.u_bounds)
        self.last_step = step
        diag[1], diag[2], diag[3], diag[5], diag[6] = gp, gv, step.b, 1.0, step.relaxed
        return step.u

    def kernel_vector(self, config):
        if self.estimator is not None:
            return None
        return self._vector()

    def _vector(self):
        c = super()._vector()
        c[K.C_EPS], c[K.C_ETA], c[K.C_DX], c[K.C_DV] = self.epsilon, self.eta, self.dx, self.dv
        return c


class CallableController(Controller):
    """Adapter for a plain function ``f(observation) -> acceleration``."""

    name = "callable"

    def __init__(self, fn: Callable[[Observation], float], v_target: float = 0.0,
                 emergency: EmergencyLayer | None = None):
        super().__init__(v_target, (-math.inf, math.inf), 1.0, emergency)
        self.fn = fn

    def command(self, obs, diag):
        return float(self.fn(obs))


def as_controller(obj) -> Controller:
    if isinstance(obj, Controller):
        return obj
    if callable(obj):
        return CallableController(obj)
    raise TypeError(f"not a controller: {obj!r}")


# ---------------------------------------------------------------------------
# factories


def deployed_emergency(scenario: ScenarioConfig, controllers: ControllerConfig) -> EmergencyLayer:
    mode = controllers.deployed_emergency
    if mode == "threat":
        return EmergencyLayer("threat", commit=True, threat_accel=scenario.u_bounds[1], margin=scenario.threat_margin)
    return EmergencyLayer(mode, margin=scenario.threat_margin)


def estimation_emergency(scenario: ScenarioConfig, mode: str) -> EmergencyLayer:
    """Emergency rule of the policy whose safety the risk table estimates."""
    return EmergencyLayer(mode, commit=False, threat_accel=0.0, margin=scenario.threat_margin)


def estimation_controller(scenario: ScenarioConfig, v0: float, mode: str = "threat_latch") -> CruiseController:
    """Policy under estimation: hold the initial speed, latch braking per ``mode``."""
    return CruiseController(v0, scenario.u_bounds, scenario.dt, estimation_emergency(scenario, mode))


def make_controller(method: str, cfg: ExperimentConfig, v_target: float, epsilon: float | None = None,
                    table: TableLike | None = None) -> Controller:
    """Build a deployed controller by method name."""
    sc, cc = cfg.scenario, cfg.controllers
    ub, dt = sc.u_bounds, sc.dt
    layer = deployed_emergency(sc, cc)
    if method == "cruise":
        return CruiseController(v_target, ub, dt, layer, cc.cruise_gain)
    if method == "pid":
        g = cc.pid
        return PIDController(v_target, ub, dt, g.kp, g.ki, g.kd, g.i_max)
    if method == "planning":
        pl = cc.planning
        return PlanningController(v_target, ub, dt, pl.stop_point, pl.decel, pl.dwell, pl.accel, layer, cc.cruise_gain)
    if method in ("worst_case", "proposed") and table is None:
        raise ValueError(f"method {method!r} needs a risk table")
    if method == "worst_case":
        return WorstCaseController(v_target, ub, dt, table, cc.worst_case_decel, cc.worst_case_pulse, layer,
                                   cc.cruise_gain)
    if method == "proposed":
        s = cc.safe
        eps = s.epsilon if epsilon is None else epsilon
        return SafeController(v_target, ub, dt, table, eps, s.eta, s.dx_probe, s.dv_probe, layer, cc.cruise_gain)
    raise ConfigError(f"unknown method {method!r}")
