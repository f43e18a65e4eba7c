import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from occsafe.config import ConfigError, ExperimentConfig
from occsafe.controllers import (
    RELAX_FALLBACK,
    ConstraintInstance,
    InfeasibleQP,
    Observation,
    PIDState,
    PlanningController,
    SafeController,
    WorstCaseController,
    make_controller,
    nominal_cruise,
    pid_velocity,
    required_decel,
    safe_control_step,
    solve_safe_qp,
    synthesize_constraint,
)
from occsafe.world import VehicleState, run_trial, step_vehicle

from helpers import grid_oracle, no_arrivals, sigmoid, synthetic_table

BOUNDS = (-6.0, 3.0)


def obs(p, v, k=0):
    return Observation(t=k * 0.05, k=k, state=VehicleState(p, v))


# -- nominal laws -------------------------------------------------------------


def test_cruise_examples():
    assert nominal_cruise(5.0, 5.0, 1.0, BOUNDS) == 0.0
    assert nominal_cruise(0.0, 5.0, 1.0, BOUNDS) == 3.0
    assert nominal_cruise(10.0, 5.0, 1.0, BOUNDS) == -5.0


def test_pid_zero_error():
    u, st_ = pid_velocity(PIDState(), 4.0, 4.0, 1.0, 0.1, 0.0, 2.0, 0.05, BOUNDS)
    assert u == 0.0 and st_.integral == 0.0


def test_pid_p_only_is_cruise():
    for v in np.linspace(0, 10, 21):
        u, _ = pid_velocity(PIDState(), v, 5.0, 1.0, 0.0, 0.0, 2.0, 0.05, BOUNDS)
        assert u == nominal_cruise(v, 5.0, 1.0, BOUNDS)


def test_pid_integrator_saturates():
    state, e, dt, i_max = PIDState(), 0.5, 0.05, 2.0
    for n in range(1, 200):
        _, state = pid_velocity(state, 4.5, 5.0, 1.0, 0.1, 0.0, i_max, dt, BOUNDS)
        assert state.integral == pytest.approx(min(n * e * dt, i_max))
    assert state.integral == i_max


def test_worst_case_pulse():
    table_risky = synthetic_table(lambda P, V: 0.5 + 0 * P)
    wc = WorstCaseController(8.0, BOUNDS, 0.05, table_risky, decel=6.0, pulse=0.25)
    assert wc.pulse_steps == 5
    assert [wc(obs(-50.0, 8.0, k)) for k in range(5)] == [-6.0] * 5
    safe_table = synthetic_table(lambda P, V: 1.0 + 0 * P)
    wc.table = safe_table
    wc.timer = 1
    assert wc(obs(-50.0, 8.0)) == -6.0
    assert wc(obs(-50.0, 7.0)) == nominal_cruise(7.0, 8.0, 1.0, BOUNDS)


def test_worst_case_without_risk_is_cruise():
    wc = WorstCaseController(8.0, BOUNDS, 0.05, synthetic_table(lambda P, V: 1.0 + 0 * P))
    for v in (0.0, 4.0, 9.0):
        assert wc(obs(-100.0, v)) == nominal_cruise(v, 8.0, 1.0, BOUNDS)


def test_required_decel_formula():
    assert required_decel(-25.0, 5.0, 0.0) == pytest.approx(0.5)
    assert required_decel(0.0, 0.0, 10.0) == 0.0


def test_planning_profile():
    pl = PlanningController(8.0, BOUNDS, 0.05, stop_point=-6.0, decel=1.5, dwell=2.0, accel=1.5)
    assert pl(obs(-170.0, 8.0)) == 0.0  # far upstream: cruise
    pl.reset()
    pl.mem[4] = 1.0  # dwell phase
    pl.mem[3] = 10.0
    assert pl(obs(-6.0, 0.0)) == 0.0
    sc = no_arrivals()
    r = run_trial(sc, PlanningController(8.0, sc.u_bounds, sc.dt), 120.0, 0, -60.0, 8.0)
    tr = r.trajectory
    stopped = (tr.v == 0.0) & (tr.p > -8.0)
    assert stopped.any()
    assert abs(tr.p[stopped].max() - (-6.0)) < 0.1
    dwell = stopped.sum() * sc.dt
    assert dwell == pytest.approx(2.0, abs=0.2)
    assert r.safe == 1


# -- constraint and QP ----------------------------------------------------------


def test_constraint_at_boundary():
    c = synthesize_constraint(0.9, 0.03, 0.01, 4.0, 0.1, 0.2)
    assert c.b == pytest.approx(-0.03 * 4.0)


def test_constraint_worked_example():
    c = synthesize_constraint(0.85, 0.01, 0.02, 5.0, 0.1, 0.2)
    assert c.a == 0.02
    psi, gp, v, eps, eta = 0.85, 0.01, 5.0, 0.1, 0.2
    assert c.b == pytest.approx(-eta * (psi - (1 - eps)) - gp * v) and c.b == pytest.approx(-0.04)


def test_constraint_slack():
    c = synthesize_constraint(0.99, 0.0, 0.0, 3.0, 0.1, 0.2)
    assert c.b < 0 and c.satisfied(-6.0) and c.satisfied(3.0)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_constraint_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        synthesize_constraint(0.9, bad, 0.0, 1.0, 0.1, 0.2)


def test_qp_examples():
    assert solve_safe_qp(ConstraintInstance(0.02, -0.04), -3.0, BOUNDS) == pytest.approx(-2.0)
    assert grid_oracle(0.02, -0.04, -6.0, 3.0, -3.0) == pytest.approx(-2.0, abs=1e-4)
    assert solve_safe_qp(ConstraintInstance(-0.01, 0.02), 1.0, BOUNDS) == pytest.approx(-2.0)
    assert grid_oracle(-0.01, 0.02, -6.0, 3.0, 1.0) == pytest.approx(-2.0, abs=1e-4)
    assert solve_safe_qp(ConstraintInstance(0.3, -1.0), 1.0, BOUNDS) == 1.0
    with pytest.raises(InfeasibleQP):
        solve_safe_qp(ConstraintInstance(0.0, 0.1), 0.0, BOUNDS)
    with pytest.raises(InfeasibleQP):
        solve_safe_qp(ConstraintInstance(0.01, 0.5), 0.0, BOUNDS)


finite = dict(allow_nan=False, allow_infinity=False)


@given(a=st.floats(-1, 1, **finite), b=st.floats(-1, 1, **finite), u_nom=st.floats(-10, 10, **finite))
def test_nominal_passthrough(a, b, u_nom):
    assume(BOUNDS[0] <= u_nom <= BOUNDS[1] and a * u_nom >= b)
    assert solve_safe_qp(ConstraintInstance(a, b), u_nom, BOUNDS) == u_nom


@given(a=st.floats(-1, 1, **finite), b=st.floats(-1, 1, **finite), u_nom=st.floats(-10, 10, **finite))
def test_constraint_satisfaction(a, b, u_nom):
    try:
        u = solve_safe_qp(ConstraintInstance(a, b), u_nom, BOUNDS)
    except InfeasibleQP:
        assert grid_oracle(a, b, *BOUNDS, u_nom, res=1e-3) is None or abs(a) * 1e-3 > 1e-12
        return
    assert BOUNDS[0] <= u <= BOUNDS[1]
    assert a * u >= b - 1e-12


@given(a=st.floats(1e-3, 1, **finite), b1=st.floats(-1, 1, **finite), db=st.floats(0, 1, **finite),
       u_nom=st.floats(-6, 3, **finite))
def test_projection_monotone(a, b1, db, u_nom):
    def solve(b):
        try:
            return solve_safe_qp(ConstraintInstance(a, b), u_nom, BOUNDS)
        except InfeasibleQP:
            return None

    u1, u2 = solve(b1), solve(b1 + db)
    if u1 is not None and u2 is not None:
        assert abs(u2 - u_nom) >= abs(u1 - u_nom) - 1e-15


@given(eta=st.floats(1e-6, 1.0), h=st.floats(1e-9, 1e6), h2=st.floats(1e-9, 1e6))
def test_alpha_contract(eta, h, h2):
    alpha = lambda x: eta * x  # noqa: E731
    assert alpha(h) <= h
    if h < h2:
        assert alpha(h) < alpha(h2)


def test_safe_params_reject_eta_zero():
    cfg = ExperimentConfig()
    bad = dataclasses.replace(cfg.controllers.safe, eta=0.0)
    with pytest.raises(ConfigError):
        bad.validate()


# -- safe controller ------------------------------------------------------------


def test_safe_step_fallback_when_gradient_flat():
    s = safe_control_step(0.5, 0.0, 0.0, 4.0, 1.0, 0.1, 0.2, BOUNDS)
    assert s.u == BOUNDS[0] and s.relaxed == RELAX_FALLBACK


def test_safe_step_eta_relaxation():
    # eta=0.2 needs a*u >= 0.2*0.4 = 0.08 -> u >= 8 (infeasible); halving once gives u >= 4 (no),
    # twice u >= 2 (feasible)
    s = safe_control_step(0.5, 0.0, 0.01, 4.0, -1.0, 0.1, 0.2, BOUNDS)
    assert s.relaxed == 2 and s.u == pytest.approx(2.0)


def test_safe_controller_nominal_where_safe():
    sc = no_arrivals()
    ctrl = SafeController(8.0, sc.u_bounds, sc.dt, synthetic_table(lambda P, V: 1.0 + 0 * P), epsilon=0.1)
    r = run_trial(sc, ctrl, 60.0, 0, -120.0, 0.0)
    tr = r.trajectory
    assert np.array_equal(tr.u[:-1], tr.rec[:-1, 11])
    assert not np.any(tr.rec[:-1, 12])


def test_safe_controller_tracks_level_set():
    """With a binding constraint the rollout hugs the 1 - eps level set."""
    eps = 0.1
    table = synthetic_table(lambda P, V: sigmoid(0.1 * (P + 100.0) * -1.0 - 0.4 * V + 6.0),
                            p_axis=np.arange(-180.0, 0.1, 0.5), v_axis=np.arange(0.0, 12.01, 0.1))
    sc = no_arrivals()
    ctrl = SafeController(8.0, sc.u_bounds, sc.dt, table, epsilon=eps, eta=0.2, dx=0.5, dv=0.1)
    # start on the level set psi = 1 - eps at v = 4
    p0 = float(table.p_axis[np.argmin(np.abs(table.values[:, 40] - (1 - eps)))])
    assert abs(table.psi(p0, 4.0) - (1 - eps)) < 0.02
    r = run_trial(sc, ctrl, 40.0, 0, p0, 4.0, engine="python")
    tr = r.trajectory
    psi = np.array([table.psi(p, v) for p, v in zip(tr.p, tr.v)])
    assert tr.rec[:-1, 12].any()
    assert psi[1:].min() >= 1 - eps - 0.02


def test_make_controller_layers():
    cfg = ExperimentConfig()
    table = synthetic_table(lambda P, V: 1.0 + 0 * P)
    pid = make_controller("pid", cfg, 8.0)
    assert pid.emergency.mode == "none"
    prop = make_controller("proposed", cfg, 8.0, 0.05, table)
    assert prop.emergency.mode == "threat" and prop.emergency.commit
    assert prop.epsilon == 0.05
    with pytest.raises(ValueError, match="risk table"):
        make_controller("worst_case", cfg, 8.0)
    with pytest.raises(ConfigError):
        make_controller("warp", cfg, 8.0)


def test_planning_profile_time_matches_rollout():
    sc = no_arrivals()
    pl = PlanningController(8.0, sc.u_bounds, sc.dt)
    r = run_trial(sc, pl, 120.0, 0, -120.0, 3.0)
    assert pl.profile_time(-120.0, 3.0, sc.safe_dist) == pytest.approx(r.traveling_time, abs=1e-9)
