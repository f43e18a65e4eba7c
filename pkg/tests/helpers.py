"""Shared test helpers: synthetic tables and hand-built worlds."""
import dataclasses

import numpy as np

from occsafe.config import ScenarioConfig, SpawnDistribution
from occsafe.risk import RiskTable

# Filled by the acceptance tests, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def synthetic_table(fn, p_axis=None, v_axis=None, **meta) -> RiskTable:
    p_axis = np.arange(-180.0, 0.1, 2.0) if p_axis is None else np.asarray(p_axis, float)
    v_axis = np.arange(0.0, 10.01, 0.5) if v_axis is None else np.asarray(v_axis, float)
    P, V = np.meshgrid(p_axis, v_axis, indexing="ij")
    return RiskTable(p_axis, v_axis, np.clip(fn(P, V), 0.0, 1.0), dict(meta))


def no_arrivals(cfg: ScenarioConfig | None = None) -> ScenarioConfig:
    return (cfg or ScenarioConfig()).with_distribution("3")


def forced_first_spawn(cfg: ScenarioConfig | None = None, **changes) -> ScenarioConfig:
    """One pedestrian spawning exactly at t=0 and nobody after."""
    return dataclasses.replace(
        cfg or ScenarioConfig(),
        first_spawn=SpawnDistribution(0.0, 1.0, 0.0, 0.0),
        subsequent_spawn=SpawnDistribution.never(),
        arrival_warmup=0.0,
        **changes,
    )


def grid_oracle(a, b, lo, hi, u_nom, res=1e-4):
    """Dense search for the admissible u closest to u_nom, or None when none exists."""
    u = np.arange(lo, hi + res / 2, res)
    u = np.append(u, hi)
    ok = a * u >= b
    if not ok.any():
        return None
    cand = u[ok]
    return float(cand[np.argmin(np.abs(cand - u_nom))])
