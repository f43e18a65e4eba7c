"""Vectorised numpy rollout, used when numba is disabled.

Trials advance in lock-step: every step works on the vector of still-running
trials. Arithmetic mirrors :mod:`occsafe.kernels` operation by operation so
the two paths agree bit-for-bit.
"""
from __future__ import annotations

import numpy as np

from .kernels import (
    C_COMMIT, C_DV, C_DX, C_EMERGENCY, C_EPS, C_ETA, C_GAIN, C_IMAX, C_KD, C_KI, C_KIND, C_KP,
    C_MARGIN, C_PL_ACCEL, C_PL_DECEL, C_PL_DWELL_STEPS, C_PL_STOP, C_THREAT_ACCEL, C_WC_DECEL,
    C_WC_STEPS, EMERGENCY_LATCH, EMERGENCY_THREAT, EMERGENCY_THREAT_LATCH, EMERGENCY_VISIBLE,
    KIND_CRUISE, KIND_PID, KIND_PLANNING, KIND_WORST, M_HAS_PREV, M_INTEG, M_LATCH, M_PHASE,
    M_PREV_ERR, M_SIZE, M_TIMER, QP_RELAX_ETA, VIS_RECT, W_DESPAWN, W_DMIN, W_DT, W_EDECEL,
    W_OCC_CX, W_OCC_CY, W_OCC_HX, W_OCC_HY, W_PED_SPEED, W_PED_X, W_PED_Y0, W_SAFE_DIST,
    W_UMAX, W_UMIN, W_VIS_HALF, W_VIS_PMAX, W_VIS_PMIN, W_VIS_RULE,
)


def clamp(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def ped_y(world, k, spawn):
    """Lateral positions at step ``k`` for a spawn-step matrix (garbage where unspawned)."""
    return world[W_PED_Y0] - world[W_PED_SPEED] * ((k - spawn) * world[W_DT])


def segment_hits_rect(x0, y0, x1, y1, cx, cy, hx, hy):
    x0, y0, x1, y1 = np.broadcast_arrays(x0, y0, x1, y1)
    t0 = np.zeros(x0.shape)
    t1 = np.ones(x0.shape)
    miss = np.zeros(x0.shape, dtype=bool)
    dx = x1 - x0
    dy = y1 - y0
    edges = ((-dx, x0 - (cx - hx)), (dx, (cx + hx) - x0), (-dy, y0 - (cy - hy)), (dy, (cy + hy) - y0))
    for pp, qq in edges:
        zero = pp == 0.0
        miss |= zero & (qq < 0.0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            r = np.where(zero, 0.0, qq / np.where(zero, 1.0, pp))
        neg = ~zero & (pp < 0.0) & ~miss
        pos = ~zero & (pp > 0.0) & ~miss
        miss |= neg & (r > t1)
        miss |= pos & (r < t0)
        t0 = np.where(neg & ~miss & (r > t0), r, t0)
        t1 = np.where(pos & ~miss & (r < t1), r, t1)
    return ~miss


def visible_mask(p, y, world):
    """Visibility of pedestrians at lateral offsets ``y`` from ego positions ``p`` (broadcast)."""
    if world[W_VIS_RULE] == VIS_RECT:
        half = world[W_VIS_HALF]
        return (world[W_VIS_PMIN] < p) & (p < world[W_VIS_PMAX]) & (y - half < 0.0) & (0.0 < y + half)
    return ~segment_hits_rect(
        p, 0.0, world[W_PED_X], y, world[W_OCC_CX], world[W_OCC_CY], world[W_OCC_HX], world[W_OCC_HY]
    )


def clear_time(p, v, target, accel):
    dist = target - p
    if accel > 0.0:
        with np.errstate(invalid="ignore"):
            t = (np.sqrt(v * v + 2.0 * accel * dist) - v) / accel
    else:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = np.where(v > 0.0, dist / np.where(v > 0.0, v, 1.0), np.inf)
    return np.where(dist <= 0.0, 0.0, t)


def threat_mask(p, v, y, world, accel, margin):
    px = world[W_PED_X]
    d_min = world[W_DMIN]
    speed = world[W_PED_SPEED]
    entry = y - d_min - margin
    if speed > 0.0:
        t_ped = np.where(entry <= 0.0, 0.0, entry / speed)
    else:
        t_ped = np.where(entry <= 0.0, 0.0, np.inf)
    out = t_ped < clear_time(p, v, px + d_min + margin, accel)
    return out & ~((p >= px + d_min) | (y <= -d_min))


def axis_index(axis, x):
    n = axis.shape[0]
    if n == 1:
        return np.zeros(x.shape, dtype=np.int64), np.zeros(x.shape)
    i = np.searchsorted(axis, x, side="right") - 1
    i = np.minimum(np.maximum(i, 0), n - 2)
    w = (x - axis[i]) / (axis[i + 1] - axis[i])
    lo = x <= axis[0]
    hi = x >= axis[n - 1]
    i = np.where(hi, n - 2, np.where(lo, 0, i))
    w = np.where(hi, 1.0, np.where(lo, 0.0, w))
    return i, w


def lerp(a, b, w):
    return a + w * (b - a)


def bilinear(p_axis, v_axis, values, p, v):
    i, wp = axis_index(p_axis, p)
    j, wv = axis_index(v_axis, v)
    i1 = i + 1 if p_axis.shape[0] > 1 else i
    j1 = j + 1 if v_axis.shape[0] > 1 else j
    lo = lerp(values[i, j], values[i, j1], wv)
    hi = lerp(values[i1, j], values[i1, j1], wv)
    return lerp(lo, hi, wp)


def solve_qp(a, b, u_min, u_max, u_nom):
    """Vectorised closed-form QP; returns (u, feasible)."""
    nz = a != 0.0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = b / np.where(nz, a, 1.0)
    lo = np.where((a > 0.0) & (r > u_min), r, u_min)
    hi = np.where((a < 0.0) & (r < u_max), r, u_max)
    ok = np.where(nz, lo <= hi, ~(b > 0.0))
    return np.where(ok, clamp(u_nom, lo, hi), u_min), ok


def constraint_rhs(psi, gp, v, eps, eta):
    return -eta * (psi - (1.0 - eps)) - gp * v


def safe_filter(psi, gp, gv, v, u_nom, eps, eta, u_min, u_max):
    u, ok = solve_qp(gv, constraint_rhs(psi, gp, v, eps, eta), u_min, u_max, u_nom)
    done = ok.copy()
    e = eta
    for _ in range(QP_RELAX_ETA):
        e = 0.5 * e
        ur, okr = solve_qp(gv, constraint_rhs(psi, gp, v, eps, e), u_min, u_max, u_nom)
        take = ~done & okr
        u = np.where(take, ur, u)
        done |= okr
    ur, okr = solve_qp(gv, constraint_rhs(psi, gp, v, 2.0 * eps, e), u_min, u_max, u_nom)
    u = np.where(~done & okr, ur, u)
    done |= okr
    return np.where(done, u, u_min)


def planning_command(p, v, v_tgt, ctrl, mem, u_min, u_max, dt):
    gain = ctrl[C_GAIN]
    x_stop = ctrl[C_PL_STOP]
    decel = ctrl[C_PL_DECEL]
    accel = ctrl[C_PL_ACCEL]
    u = np.zeros(p.shape)
    phase = mem[:, M_PHASE]
    ph0 = phase == 0.0
    arrive = ph0 & (p >= x_stop - 1.0) & (v <= 0.05)
    mem[arrive, M_PHASE] = 1.0
    mem[arrive, M_TIMER] = ctrl[C_PL_DWELL_STEPS]
    brake_zone = ph0 & ~arrive & (p >= x_stop)
    u = np.where(brake_zone, clamp(-decel - gain * v, u_min, u_max), u)
    approach = ph0 & ~arrive & ~brake_zone
    with np.errstate(invalid="ignore"):
        v_curve = np.sqrt(2.0 * decel * (x_stop - p))
    on_curve = approach & (v_curve < v_tgt)
    u = np.where(on_curve, clamp(-decel + gain * (v_curve - v), u_min, u_max), u)
    u = np.where(approach & ~on_curve, clamp(gain * (v_tgt - v), u_min, accel), u)
    dwell = mem[:, M_PHASE] == 1.0
    waiting = dwell & (mem[:, M_TIMER] > 0.0)
    mem[waiting, M_TIMER] -= 1.0
    u = np.where(waiting, clamp(-v / dt, u_min, 0.0), u)
    mem[dwell & ~waiting, M_PHASE] = 2.0
    go = mem[:, M_PHASE] == 2.0
    go &= ~waiting
    return np.where(go, clamp(gain * (v_tgt - v), u_min, accel), u)


def controller_command(kind, p, v, v_tgt, ctrl, mem, world, p_axis, v_axis, values):
    u_min = world[W_UMIN]
    u_max = world[W_UMAX]
    dt = world[W_DT]
    gain = ctrl[C_GAIN]
    if kind == KIND_CRUISE:
        return clamp(gain * (v_tgt - v), u_min, u_max)
    if kind == KIND_PID:
        err = v_tgt - v
        integ = clamp(mem[:, M_INTEG] + err * dt, -ctrl[C_IMAX], ctrl[C_IMAX])
        mem[:, M_INTEG] = integ
        deriv = np.where(mem[:, M_HAS_PREV] != 0.0, (err - mem[:, M_PREV_ERR]) / dt, 0.0)
        mem[:, M_PREV_ERR] = err
        mem[:, M_HAS_PREV] = 1.0
        return clamp(ctrl[C_KP] * err + ctrl[C_KI] * integ + ctrl[C_KD] * deriv, u_min, u_max)
    if kind == KIND_WORST:
        psi = bilinear(p_axis, v_axis, values, p, v)
        mem[psi < 1.0, M_TIMER] = ctrl[C_WC_STEPS]
        pulse = mem[:, M_TIMER] > 0.0
        mem[pulse, M_TIMER] -= 1.0
        return np.where(pulse, clamp(-ctrl[C_WC_DECEL], u_min, u_max), clamp(gain * (v_tgt - v), u_min, u_max))
    if kind == KIND_PLANNING:
        return planning_command(p, v, v_tgt, ctrl, mem, u_min, u_max, dt)
    u_nom = clamp(gain * (v_tgt - v), u_min, u_max)
    psi = bilinear(p_axis, v_axis, values, p, v)
    eps = ctrl[C_EPS]
    active = ~(psi > 1.0 - eps)
    if not active.any():
        return u_nom
    dx, dv = ctrl[C_DX], ctrl[C_DV]
    gp = (bilinear(p_axis, v_axis, values, p + dx, v) - bilinear(p_axis, v_axis, values, p - dx, v)) / (2.0 * dx)
    gv = (bilinear(p_axis, v_axis, values, p, v + dv) - bilinear(p_axis, v_axis, values, p, v - dv)) / (2.0 * dv)
    u = safe_filter(psi, gp, gv, v, u_nom, eps, ctrl[C_ETA], u_min, u_max)
    return np.where(active, u, u_nom)


def rollout_batch_numpy(p0, v0, v_tgt, spawn_steps, n_steps, world, ctrl, p_axis, v_axis, values):
    n = p0.shape[0]
    dt = world[W_DT]
    d_min = world[W_DMIN]
    px = world[W_PED_X]
    edecel = world[W_EDECEL]
    u_min, u_max = world[W_UMIN], world[W_UMAX]
    kind = int(ctrl[C_KIND])
    emergency = int(ctrl[C_EMERGENCY])
    p = p0.copy()
    v = v0.copy()
    mem = np.zeros((n, M_SIZE))
    safe = np.zeros(n, dtype=np.int8)
    t_end = np.zeros(n)
    min_dist = np.full(n, np.inf)
    idx = np.arange(n)
    for k in range(n_steps + 1):
        if idx.size == 0:
            break
        pa, va = p[idx], v[idx]
        spawn = spawn_steps[idx]
        y = ped_y(world, k, spawn)
        live = (spawn <= k) & ~(y < world[W_DESPAWN])
        dxp = pa - px
        d = np.sqrt((dxp * dxp)[:, None] + y * y)
        d_step = np.where(live, d, np.inf).min(axis=1, initial=np.inf)
        min_dist[idx] = np.minimum(min_dist[idx], d_step)
        hit = d_step < d_min
        finished = hit | (pa >= world[W_SAFE_DIST]) | (k == n_steps)
        if finished.any():
            ended = idx[finished]
            safe[ended] = np.where(hit[finished], 0, 1)
            t_end[ended] = k * dt
            keep = ~finished
            idx, pa, va, y, live = idx[keep], pa[keep], va[keep], y[keep], live[keep]
            if idx.size == 0:
                break
        vis = live & visible_mask(pa[:, None], y, world)
        m = mem[idx]
        u = controller_command(kind, pa, va, v_tgt[idx], ctrl, m, world, p_axis, v_axis, values)
        brake = np.zeros(idx.size, dtype=bool)
        stoppable = pa + va * va / (2.0 * edecel) <= px - d_min
        if emergency == EMERGENCY_VISIBLE or emergency == EMERGENCY_LATCH:
            brake = vis.any(axis=1)
        elif emergency == EMERGENCY_THREAT or emergency == EMERGENCY_THREAT_LATCH:
            threat = vis & threat_mask(pa[:, None], va[:, None], y, world, ctrl[C_THREAT_ACCEL], ctrl[C_MARGIN])
            brake = threat.any(axis=1) & stoppable
        if ctrl[C_COMMIT] != 0.0:
            u = np.where(vis.any(axis=1) & ~stoppable & (pa < px + d_min), u_max, u)
        if emergency == EMERGENCY_LATCH or emergency == EMERGENCY_THREAT_LATCH:
            m[brake, M_LATCH] = 1.0
            brake = m[:, M_LATCH] != 0.0
        u = np.where(brake, min(max(-edecel, u_min), u_max), u)
        mem[idx] = m
        v_next = va + u * dt
        v_next = np.where(v_next < 0.0, 0.0, v_next)
        v[idx] = v_next
        p[idx] = pa + v_next * dt
    return safe, t_end, min_dist
