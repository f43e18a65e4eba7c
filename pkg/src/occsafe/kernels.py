"""Hot rollout kernels.

Every numeric inner loop of the simulator lives here as plain scalar code that
numba compiles with ``@njit``. Setting ``OCCSAFE_DISABLE_NUMBA=1`` before import
switches the batch entry point to a vectorised numpy implementation
(:mod:`occsafe.kernels_np`); both paths perform the same float operations in
the same order and agree bit-for-bit.

Parameters cross the kernel boundary as flat float64 vectors indexed by the
``W_*`` (world) and ``C_*`` (controller) constants below.
"""
from __future__ import annotations

import math
import os

import numpy as np

DISABLE_NUMBA = os.environ.get("OCCSAFE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if DISABLE_NUMBA:
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
else:
    from numba import njit  # noqa: F401


# world vector layout
W_DT, W_DMIN, W_SAFE_DIST = 0, 1, 2
W_PED_X, W_PED_Y0, W_PED_SPEED, W_DESPAWN = 3, 4, 5, 6
W_VIS_RULE, W_VIS_PMIN, W_VIS_PMAX, W_VIS_HALF = 7, 8, 9, 10
W_OCC_CX, W_OCC_CY, W_OCC_HX, W_OCC_HY = 11, 12, 13, 14
W_UMIN, W_UMAX, W_EDECEL = 15, 16, 17
W_SIZE = 18

VIS_RECT, VIS_LOS = 0, 1

# controller vector layout
C_KIND, C_EMERGENCY, C_GAIN = 0, 1, 2
C_KP, C_KI, C_KD, C_IMAX = 3, 4, 5, 6
C_WC_DECEL, C_WC_STEPS = 7, 8
C_PL_STOP, C_PL_DECEL, C_PL_DWELL_STEPS, C_PL_ACCEL = 9, 10, 11, 12
C_EPS, C_ETA, C_DX, C_DV = 13, 14, 15, 16
C_MARGIN = 17
C_THREAT_ACCEL = 18
C_COMMIT = 19
C_SIZE = 20

KIND_CRUISE, KIND_PID, KIND_WORST, KIND_PLANNING, KIND_SAFE = 0, 1, 2, 3, 4

# Emergency braking on sight. VISIBLE/LATCH react to any visible pedestrian;
# THREAT/THREAT_LATCH react only to visible pedestrians that may reach the lane
# before the ego clears it, and only while the ego can still stop short of it.
# The *_LATCH variants keep braking for the rest of the trial once triggered.
EMERGENCY_NONE, EMERGENCY_VISIBLE, EMERGENCY_LATCH, EMERGENCY_THREAT, EMERGENCY_THREAT_LATCH = 0, 1, 2, 3, 4

# trajectory record columns
R_T, R_P, R_V, R_U, R_NVIS, R_MIND = 0, 1, 2, 3, 4, 5
R_PSI, R_GP, R_GV, R_A, R_B, R_UNOM, R_ACTIVE, R_RELAXED, R_EMERG = 6, 7, 8, 9, 10, 11, 12, 13, 14
R_SIZE = 15

# memory slots per trial
M_INTEG, M_PREV_ERR, M_HAS_PREV, M_TIMER, M_PHASE, M_LATCH = 0, 1, 2, 3, 4, 5
M_SIZE = 6

QP_RELAX_ETA = 3  # halvings of eta before relaxing epsilon

NO_SPAWN = np.iinfo(np.int64).max


@njit(cache=True)
def clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


@njit(cache=True)
def step_vehicle(p, v, u, dt):
    """Implicit Euler: speed first (floored at zero), then position from the new speed."""
    v_next = v + u * dt
    if v_next < 0.0:
        v_next = 0.0
    return p + v_next * dt, v_next


@njit(cache=True)
def ped_y(y0, speed, dt, k, k_spawn):
    return y0 - speed * ((k - k_spawn) * dt)


@njit(cache=True)
def rect_visible(p, ped_yv, p_min, p_max, half):
    return p_min < p < p_max and ped_yv - half < 0.0 < ped_yv + half


@njit(cache=True)
def segment_hits_rect(x0, y0, x1, y1, cx, cy, hx, hy):
    """Liang-Barsky clip of segment (x0,y0)-(x1,y1) against a closed box."""
    t0 = 0.0
    t1 = 1.0
    dx = x1 - x0
    dy = y1 - y0
    for i in range(4):
        if i == 0:
            pp, qq = -dx, x0 - (cx - hx)
        elif i == 1:
            pp, qq = dx, (cx + hx) - x0
        elif i == 2:
            pp, qq = -dy, y0 - (cy - hy)
        else:
            pp, qq = dy, (cy + hy) - y0
        if pp == 0.0:
            if qq < 0.0:
                return False
        else:
            r = qq / pp
            if pp < 0.0:
                if r > t1:
                    return False
                if r > t0:
                    t0 = r
            else:
                if r < t0:
                    return False
                if r < t1:
                    t1 = r
    return True


@njit(cache=True)
def is_visible(p, px, py, world):
    if world[W_VIS_RULE] == VIS_RECT:
        return rect_visible(p, py, world[W_VIS_PMIN], world[W_VIS_PMAX], world[W_VIS_HALF])
    return not segment_hits_rect(
        p, 0.0, px, py, world[W_OCC_CX], world[W_OCC_CY], world[W_OCC_HX], world[W_OCC_HY]
    )


@njit(cache=True)
def clear_time(p, v, target, accel):
    """Time for the ego to reach ``target`` from (p, v) under constant ``accel`` >= 0."""
    dist = target - p
    if dist <= 0.0:
        return 0.0
    if accel > 0.0:
        return (math.sqrt(v * v + 2.0 * accel * dist) - v) / accel
    if v > 0.0:
        return dist / v
    return np.inf


@njit(cache=True)
def is_threat(p, v, px, y, ped_speed, d_min, accel, margin):
    """True when the pedestrian may reach the lane before the ego can clear it.

    The ego clears once past ``px + d_min + margin`` and is credited with
    constant acceleration ``accel`` (0 means it holds its speed); the pedestrian enters the lane band at
    ``y = d_min + margin`` and is harmless once below ``-d_min``.
    """
    if p >= px + d_min or y <= -d_min:
        return False
    entry = y - d_min - margin
    if entry <= 0.0:
        t_ped = 0.0
    elif ped_speed > 0.0:
        t_ped = entry / ped_speed
    else:
        return False
    return t_ped < clear_time(p, v, px + d_min + margin, accel)


@njit(cache=True)
def count_threats(p, v, k, spawn_steps, world, accel, margin):
    """Visible threatening pedestrians at step ``k``."""
    dt = world[W_DT]
    px = world[W_PED_X]
    n = 0
    for j in range(spawn_steps.shape[0]):
        ks = spawn_steps[j]
        if ks > k:
            break
        y = ped_y(world[W_PED_Y0], world[W_PED_SPEED], dt, k, ks)
        if y < world[W_DESPAWN]:
            continue
        if is_visible(p, px, y, world) and is_threat(
            p, v, px, y, world[W_PED_SPEED], world[W_DMIN], accel, margin
        ):
            n += 1
    return n


@njit(cache=True)
def _axis_index(axis, x):
    n = axis.shape[0]
    if n == 1:
        return 0, 0.0
    if x <= axis[0]:
        return 0, 0.0
    if x >= axis[n - 1]:
        return n - 2, 1.0
    i = np.searchsorted(axis, x, side="right") - 1
    if i > n - 2:
        i = n - 2
    w = (x - axis[i]) / (axis[i + 1] - axis[i])
    return i, w


@njit(cache=True)
def lerp(a, b, w):
    return a + w * (b - a)


@njit(cache=True)
def bilinear(p_axis, v_axis, values, p, v):
    """Bilinear interpolation of ``values[i_p, i_v]``; queries clamp to the box."""
    i, wp = _axis_index(p_axis, p)
    j, wv = _axis_index(v_axis, v)
    i1 = i + 1 if p_axis.shape[0] > 1 else i
    j1 = j + 1 if v_axis.shape[0] > 1 else j
    lo = lerp(values[i, j], values[i, j1], wv)
    hi = lerp(values[i1, j], values[i1, j1], wv)
    return lerp(lo, hi, wp)


@njit(cache=True)
def table_gradient(p_axis, v_axis, values, p, v, dx, dv):
    gp = (bilinear(p_axis, v_axis, values, p + dx, v) - bilinear(p_axis, v_axis, values, p - dx, v)) / (2.0 * dx)
    gv = (bilinear(p_axis, v_axis, values, p, v + dv) - bilinear(p_axis, v_axis, values, p, v - dv)) / (2.0 * dv)
    return gp, gv


@njit(cache=True)
def qp_interval(a, b, u_min, u_max):
    """Feasible interval of {u in [u_min, u_max] : a*u >= b}; lo > hi when empty."""
    lo = u_min
    hi = u_max
    if a > 0.0:
        r = b / a
        if r > lo:
            lo = r
    elif a < 0.0:
        r = b / a
        if r < hi:
            hi = r
    elif b > 0.0:
        return 1.0, -1.0
    return lo, hi


@njit(cache=True)
def solve_qp(a, b, u_min, u_max, u_nom):
    """argmin (u - u_nom)^2 over the feasible interval; returns (u, feasible)."""
    lo, hi = qp_interval(a, b, u_min, u_max)
    if lo > hi:
        return u_min, False
    return clamp(u_nom, lo, hi), True


@njit(cache=True)
def constraint_rhs(psi, gp, v, eps, eta):
    return -eta * (psi - (1.0 - eps)) - gp * v


@njit(cache=True)
def safe_filter(psi, gp, gv, v, u_nom, eps, eta, u_min, u_max):
    """Constrain ``u_nom`` with the invariance condition, relaxing on infeasibility.

    Returns (u, b, relaxed) where relaxed counts relaxation steps taken
    (0 = none, 1..3 = eta halvings, 4 = epsilon doubled, 5 = fallback brake).
    """
    b = constraint_rhs(psi, gp, v, eps, eta)
    u, ok = solve_qp(gv, b, u_min, u_max, u_nom)
    if ok:
        return u, b, 0
    e = eta
    for r in range(1, QP_RELAX_ETA + 1):
        e = 0.5 * e
        u, ok = solve_qp(gv, constraint_rhs(psi, gp, v, eps, e), u_min, u_max, u_nom)
        if ok:
            return u, b, r
    u, ok = solve_qp(gv, constraint_rhs(psi, gp, v, 2.0 * eps, e), u_min, u_max, u_nom)
    if ok:
        return u, b, QP_RELAX_ETA + 1
    return u_min, b, QP_RELAX_ETA + 2


@njit(cache=True)
def planning_command(p, v, v_tgt, ctrl, mem, u_min, u_max, dt):
    """Stop-and-go profile: brake curve to the stop point, dwell, then re-accelerate.

    ``mem[M_PHASE]``: 0 approach, 1 dwell, 2 go. ``mem[M_TIMER]`` counts dwell steps.
    """
    gain = ctrl[C_GAIN]
    x_stop = ctrl[C_PL_STOP]
    decel = ctrl[C_PL_DECEL]
    accel = ctrl[C_PL_ACCEL]
    phase = mem[M_PHASE]
    if phase == 0.0:
        if p >= x_stop - 1.0 and v <= 0.05:
            mem[M_PHASE] = 1.0
            mem[M_TIMER] = ctrl[C_PL_DWELL_STEPS]
            phase = 1.0
        elif p >= x_stop:
            return clamp(-decel - gain * v, u_min, u_max)
        else:
            v_curve = math.sqrt(2.0 * decel * (x_stop - p))
            if v_curve < v_tgt:
                return clamp(-decel + gain * (v_curve - v), u_min, u_max)
            return clamp(gain * (v_tgt - v), u_min, accel)
    if phase == 1.0:
        if mem[M_TIMER] > 0.0:
            mem[M_TIMER] -= 1.0
            return clamp(-v / dt, u_min, 0.0)
        mem[M_PHASE] = 2.0
    return clamp(gain * (v_tgt - v), u_min, accel)


@njit(cache=True)
def controller_command(kind, p, v, v_tgt, ctrl, mem, world, p_axis, v_axis, values, diag):
    """Nominal/filtered command of controller ``kind``; fills ``diag`` for the safe filter."""
    u_min = world[W_UMIN]
    u_max = world[W_UMAX]
    dt = world[W_DT]
    gain = ctrl[C_GAIN]
    if kind == KIND_CRUISE:
        return clamp(gain * (v_tgt - v), u_min, u_max)
    if kind == KIND_PID:
        err = v_tgt - v
        integ = clamp(mem[M_INTEG] + err * dt, -ctrl[C_IMAX], ctrl[C_IMAX])
        mem[M_INTEG] = integ
        deriv = 0.0
        if mem[M_HAS_PREV] != 0.0:
            deriv = (err - mem[M_PREV_ERR]) / dt
        mem[M_PREV_ERR] = err
        mem[M_HAS_PREV] = 1.0
        return clamp(ctrl[C_KP] * err + ctrl[C_KI] * integ + ctrl[C_KD] * deriv, u_min, u_max)
    if kind == KIND_WORST:
        psi = bilinear(p_axis, v_axis, values, p, v)
        diag[0] = psi
        if psi < 1.0:
            mem[M_TIMER] = ctrl[C_WC_STEPS]
        if mem[M_TIMER] > 0.0:
            mem[M_TIMER] -= 1.0
            diag[5] = 1.0
            return clamp(-ctrl[C_WC_DECEL], u_min, u_max)
        return clamp(gain * (v_tgt - v), u_min, u_max)
    if kind == KIND_PLANNING:
        return planning_command(p, v, v_tgt, ctrl, mem, u_min, u_max, dt)
    # KIND_SAFE
    u_nom = clamp(gain * (v_tgt - v), u_min, u_max)
    psi = bilinear(p_axis, v_axis, values, p, v)
    diag[0] = psi
    diag[4] = u_nom
    eps = ctrl[C_EPS]
    if psi > 1.0 - eps:
        return u_nom
    gp, gv = table_gradient(p_axis, v_axis, values, p, v, ctrl[C_DX], ctrl[C_DV])
    u, b, relaxed = safe_filter(psi, gp, gv, v, u_nom, eps, ctrl[C_ETA], u_min, u_max)
    diag[1] = gp
    diag[2] = gv
    diag[3] = b
    diag[5] = 1.0
    diag[6] = relaxed
    return u


@njit(cache=True)
def rollout_one(p, v, v_tgt, spawn_steps, n_steps, world, ctrl, p_axis, v_axis, values, record, rec):
    """Simulate one trial.

    Returns (safe, t_end, min_dist, end_step). Termination is checked at the
    top of every step: collision (unsafe), passing ``safe_dist`` or reaching
    ``n_steps`` (safe). When ``record`` is set, row k of ``rec`` holds the
    state at step k and the command applied from it.
    """
    dt = world[W_DT]
    d_min = world[W_DMIN]
    safe_dist = world[W_SAFE_DIST]
    px = world[W_PED_X]
    y0 = world[W_PED_Y0]
    speed = world[W_PED_SPEED]
    despawn = world[W_DESPAWN]
    edecel = world[W_EDECEL]
    u_min = world[W_UMIN]
    u_max = world[W_UMAX]
    kind = int(ctrl[C_KIND])
    emergency = int(ctrl[C_EMERGENCY])
    n_peds = spawn_steps.shape[0]
    mem = np.zeros(M_SIZE)
    diag = np.zeros(7)
    first = 0
    min_dist = np.inf
    for k in range(n_steps + 1):
        t = k * dt
        n_vis = 0
        n_threat = 0
        d_step = np.inf
        for j in range(first, n_peds):
            ks = spawn_steps[j]
            if ks > k:
                break
            y = ped_y(y0, speed, dt, k, ks)
            if y < despawn:
                if j == first:
                    first = j + 1
                continue
            d = math.sqrt((p - px) * (p - px) + y * y)
            if d < d_step:
                d_step = d
            if is_visible(p, px, y, world):
                n_vis += 1
                if is_threat(p, v, px, y, speed, d_min, ctrl[C_THREAT_ACCEL], ctrl[C_MARGIN]):
                    n_threat += 1
        if d_step < min_dist:
            min_dist = d_step
        if record:
            rec[k, R_T] = t
            rec[k, R_P] = p
            rec[k, R_V] = v
            rec[k, R_NVIS] = n_vis
            rec[k, R_MIND] = d_step
        if d_step < d_min:
            return 0, t, min_dist, k
        if p >= safe_dist or k == n_steps:
            return 1, t, min_dist, k
        for i in range(7):
            diag[i] = 0.0
        u = controller_command(kind, p, v, v_tgt, ctrl, mem, world, p_axis, v_axis, values, diag)
        brake = False
        stoppable = p + v * v / (2.0 * edecel) <= px - d_min
        if emergency == EMERGENCY_VISIBLE or emergency == EMERGENCY_LATCH:
            brake = n_vis > 0
        elif emergency == EMERGENCY_THREAT or emergency == EMERGENCY_THREAT_LATCH:
            brake = n_threat > 0 and stoppable
        if ctrl[C_COMMIT] != 0.0 and n_vis > 0 and not stoppable and p < px + d_min:
            # past the point of stopping short with someone in view: clear the crossing
            u = u_max
        if emergency == EMERGENCY_LATCH or emergency == EMERGENCY_THREAT_LATCH:
            if brake:
                mem[M_LATCH] = 1.0
            brake = mem[M_LATCH] != 0.0
        if brake:
            u = clamp(-edecel, u_min, u_max)
        if record:
            rec[k, R_U] = u
            rec[k, R_PSI] = diag[0]
            rec[k, R_GP] = diag[1]
            rec[k, R_GV] = diag[2]
            rec[k, R_A] = diag[2]
            rec[k, R_B] = diag[3]
            rec[k, R_UNOM] = diag[4]
            rec[k, R_ACTIVE] = diag[5]
            rec[k, R_RELAXED] = diag[6]
            rec[k, R_EMERG] = 1.0 if brake else 0.0
        p, v = step_vehicle(p, v, u, dt)
    return 1, n_steps * dt, min_dist, n_steps


@njit(cache=True)
def rollout_batch_numba(p0, v0, v_tgt, spawn_steps, n_steps, world, ctrl, p_axis, v_axis, values):
    n = p0.shape[0]
    safe = np.zeros(n, dtype=np.int8)
    t_end = np.zeros(n)
    min_dist = np.zeros(n)
    dummy = np.zeros((1, R_SIZE))
    for i in range(n):
        s, t, d, _ = rollout_one(
            p0[i], v0[i], v_tgt[i], spawn_steps[i], n_steps, world, ctrl, p_axis, v_axis, values, False, dummy
        )
        safe[i] = s
        t_end[i] = t
        min_dist[i] = d
    return safe, t_end, min_dist


def rollout_batch(p0, v0, v_tgt, spawn_steps, n_steps, world, ctrl, p_axis, v_axis, values):
    """Run a batch of independent trials; dispatches on ``DISABLE_NUMBA``.

    ``spawn_steps`` is an (n_trials, max_peds) int64 matrix of sorted spawn
    steps padded with ``NO_SPAWN``.
    """
    args = (
        np.ascontiguousarray(p0, dtype=np.float64),
        np.ascontiguousarray(v0, dtype=np.float64),
        np.ascontiguousarray(v_tgt, dtype=np.float64),
        np.ascontiguousarray(spawn_steps, dtype=np.int64),
        int(n_steps),
        np.ascontiguousarray(world, dtype=np.float64),
        np.ascontiguousarray(ctrl, dtype=np.float64),
        np.ascontiguousarray(p_axis, dtype=np.float64),
        np.ascontiguousarray(v_axis, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
    )
    if DISABLE_NUMBA:
        from .kernels_np import rollout_batch_numpy

        return rollout_batch_numpy(*args)
    return rollout_batch_numba(*args)


def rollout_record(p0, v0, v_tgt, spawn_steps, n_steps, world, ctrl, p_axis, v_axis, values):
    """Single trial with a full per-step record; returns (safe, t_end, min_dist, rec)."""
    rec = np.full((int(n_steps) + 1, R_SIZE), np.nan)
    s, t, d, k = rollout_one(
        float(p0), float(v0), float(v_tgt),
        np.ascontiguousarray(spawn_steps, dtype=np.int64), int(n_steps),
        np.ascontiguousarray(world, dtype=np.float64), np.ascontiguousarray(ctrl, dtype=np.float64),
        np.ascontiguousarray(p_axis, dtype=np.float64), np.ascontiguousarray(v_axis, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64), True, rec,
    )
    return int(s), float(t), float(d), rec[: k + 1]
