"""Seeding and pedestrian arrival sampling.

All randomness in a trial is the pedestrian arrival schedule. Schedules are
drawn in numpy from a per-trial generator whose seed is split off a root seed
by counter (``SeedSequence`` spawn keys), so trial ``n`` of an estimate is the
same no matter how many trials run, in which order, or on how many workers.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .config import ScenarioConfig, SpawnDistribution
from .kernels import NO_SPAWN

_BLOCK = 32


class SamplingError(RuntimeError):
    """Rejection sampling gave up: too little probability mass in the accepted set."""


def derive_seed(root: int, *keys: int) -> int:
    """Child seed of ``root`` at counter path ``keys`` (non-negative integers)."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def label_key(label: str) -> int:
    """Stable non-negative integer for a text label, usable as a seed key."""
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(trial),))))


def sample_truncated_normal(rng: np.random.Generator, dist: SpawnDistribution, max_rejections: int = 10_000) -> float:
    """One draw from N(mean, std^2) conditioned on [lower, upper], by rejection."""
    lo, hi = dist.lower, dist.upper
    if lo == hi:
        return float(lo)
    for _ in range(max_rejections):
        x = rng.normal(dist.mean, dist.std)
        if lo <= x <= hi:
            return float(x)
    raise SamplingError(f"no sample in [{lo}, {hi}] after {max_rejections} draws from N({dist.mean}, {dist.std}^2)")


def sample_truncated_normal_block(
    rng: np.random.Generator, dist: SpawnDistribution, size: int, max_rejections: int = 10_000
) -> np.ndarray:
    """``size`` independent truncated-normal draws; rejection done in blocks."""
    lo, hi = dist.lower, dist.upper
    if lo == hi:
        return np.full(size, float(lo))
    out = np.empty(0)
    drawn = 0
    while out.size < size:
        if drawn >= max_rejections + size:
            raise SamplingError(
                f"no sample in [{lo}, {hi}] after {drawn} draws from N({dist.mean}, {dist.std}^2)"
            )
        x = rng.normal(dist.mean, dist.std, size=max(_BLOCK, 2 * (size - out.size)))
        drawn += x.size
        out = np.concatenate([out, x[(x >= lo) & (x <= hi)]])
    return out[:size]


def spawn_times(rng: np.random.Generator, config: ScenarioConfig, horizon: float) -> np.ndarray:
    """Arrival times up to ``horizon``, relative to trial start.

    The arrival process starts ``config.arrival_warmup`` seconds before the
    trial, so early arrivals are negative and may be part-way across at t=0.
    The first gap comes from ``first_spawn``, later ones from ``subsequent_spawn``.
    """
    if config.first_spawn.disabled:
        return np.empty(0)
    t0 = -config.arrival_warmup + sample_truncated_normal_block(rng, config.first_spawn, 1, config.max_rejections)[0]
    if t0 > horizon:
        return np.empty(0)
    if config.subsequent_spawn.disabled:
        return np.array([t0])
    times = [np.array([t0])]
    last = t0
    while last <= horizon:
        need = max(_BLOCK // 2, int(math.ceil((horizon - last) / max(config.subsequent_spawn.mean, 1e-3))) + 4)
        gaps = sample_truncated_normal_block(rng, config.subsequent_spawn, need, config.max_rejections)
        steps = last + np.cumsum(gaps)
        times.append(steps)
        last = steps[-1]
    out = np.concatenate(times)
    return out[out <= horizon]


def time_to_step(t, dt: float):
    """First step index k with k*dt >= t (tolerant to float noise); may be negative."""
    return np.ceil(np.asarray(t) / dt - 1e-9).astype(np.int64)


def spawn_steps(times, config: ScenarioConfig) -> np.ndarray:
    """Spawn steps of ``times``, dropping pedestrians already gone at step 0."""
    steps = time_to_step(np.asarray(times, dtype=np.float64), config.dt)
    y0 = config.ped_spawn_point[1]
    y_at_0 = y0 - config.ped_speed * ((0 - steps) * config.dt)
    return steps[~(y_at_0 < config.ped_despawn_y)]


def pad_rows(rows) -> np.ndarray:
    """Stack ragged spawn-step rows into a matrix padded with ``NO_SPAWN``."""
    width = max([len(r) for r in rows] + [1])
    out = np.full((len(rows), width), NO_SPAWN, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def trial_spawn_steps(config: ScenarioConfig, seed: int, trial: int, horizon: float) -> np.ndarray:
    return spawn_steps(spawn_times(trial_rng(seed, trial), config, horizon), config)


def spawn_step_matrix(config: ScenarioConfig, seed: int, n_trials: int, horizon: float, first_trial: int = 0) -> np.ndarray:
    """(n_trials, max_peds) matrix of spawn steps for trials ``first_trial, ...``."""
    return pad_rows([trial_spawn_steps(config, seed, first_trial + n, horizon) for n in range(n_trials)])


def conditioned_spawn_matrix(
    config: ScenarioConfig,
    seed: int,
    n_trials: int,
    horizon: float,
    accept: Callable[[np.ndarray], np.ndarray],
    max_attempts: int,
) -> np.ndarray:
    """Spawn matrix of the first ``n_trials`` attempts accepted by ``accept``.

    Attempt ``a`` always draws from ``trial_rng(seed, a)``, so the accepted set
    is a deterministic function of ``seed``. ``accept`` maps a padded spawn
    matrix to a boolean row mask.
    """
    rows: list[np.ndarray] = []
    attempt = 0
    while len(rows) < n_trials:
        if attempt >= max_attempts:
            raise SamplingError(
                f"only {len(rows)} of {n_trials} schedules accepted after {attempt} attempts; "
                "the conditioning event is too rare for this state"
            )
        chunk = min(max(n_trials - len(rows), 16), max_attempts - attempt)
        cand = [trial_spawn_steps(config, seed, attempt + i, horizon) for i in range(chunk)]
        mask = accept(pad_rows(cand))
        rows.extend(r for r, ok in zip(cand, mask) if ok)
        attempt += chunk
    return pad_rows(rows[:n_trials])
