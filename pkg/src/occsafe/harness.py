"""Batch experiments: per-setting evaluation, trade-off sweeps, ablations, checks.

Within a setting every method faces the same pedestrian schedules (trial n of
setting s uses ``trial_rng(setting_seed(root, s), n)``), so method
comparisons are paired. Trials are split into contiguous chunks for worker
processes; results never depend on the worker count.
"""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels as K
from .config import ConfigError, ExperimentConfig, ScenarioConfig, Setting
from .controllers import Controller, PlanningController, make_controller
from .risk import RiskTable, TableError, load_table, wilson_interval
from .sampling import derive_seed, label_key, spawn_step_matrix
from .world import Trajectory, n_steps_for, run_trial, world_vector

TABLE_METHODS = ("proposed", "worst_case")
BOOTSTRAP_RESAMPLES = 10_000
BOOTSTRAP_KEY = 0xB007
ALPHA_SETTING = Setting(-120.0, 0.0, 0.9)
ALPHA_ETAS = (0.05, 0.1, 0.2, 0.5, 1.0)


class MissingTableError(TableError):
    """A table-backed controller was requested without a risk table."""


@dataclass
class EvalSummary:
    method: str
    x_init: float
    v_init: float
    one_minus_eps: float
    p_safe: float
    wilson_lo: float
    wilson_hi: float
    mean_t: float
    n_trials: int
    n_censored: int = 0
    eta: float | None = None
    safe: np.ndarray = field(default=None, repr=False, compare=False)
    times: np.ndarray = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("safe", "times")}
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def wilson(k: int, n: int) -> tuple[float, float]:
    return wilson_interval(k, n)


def setting_label(s: Setting) -> str:
    return f"x={s.x_init!r},v={s.v_init!r}"


def setting_seed(root: int, s: Setting) -> int:
    """Seed of a setting's schedules; independent of epsilon so settings that
    differ only in risk tolerance share their worlds."""
    return derive_seed(root, label_key(setting_label(s)))


def resolve_table(cfg: ExperimentConfig, method: str, table: RiskTable | None) -> RiskTable | None:
    if method not in TABLE_METHODS:
        return table
    if table is None and cfg.table:
        table = load_table(cfg.table, cfg.scenario, cfg.risk)
    if table is None:
        raise MissingTableError(
            f"method {method!r} needs a risk table: build one with `occsafe build-table --out <dir>` "
            "and pass it with `--set table=<dir>/table.json`"
        )
    return table


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    k = max(1, min(workers, n))
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunk(args):
    scenario, seed, first, count, horizon, p0, v0, v_tgt, ctrl_vec, p_axis, v_axis, values = args
    spawn = spawn_step_matrix(scenario, seed, count, horizon, first_trial=first)
    safe, t, _ = K.rollout_batch(
        np.full(count, p0), np.full(count, v0), np.full(count, v_tgt), spawn, n_steps_for(horizon, scenario.dt),
        world_vector(scenario), ctrl_vec, p_axis, v_axis, values,
    )
    return safe, t


def run_batch(scenario: ScenarioConfig, controller: Controller, seed: int, n_trials: int, horizon: float,
              p0: float, v0: float, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Safe flags and traveling times of trials ``0..n_trials-1`` of ``seed``."""
    vec = controller.kernel_vector(scenario)
    if vec is None:
        res = [run_trial(scenario, controller, horizon, seed, p0, v0, trial=n) for n in range(n_trials)]
        return np.array([r.safe for r in res], dtype=np.int8), np.array([r.traveling_time for r in res])
    p_axis, v_axis, values = controller.kernel_table()
    tasks = [(scenario, seed, a, b - a, horizon, float(p0), float(v0), controller.v_target, vec, p_axis, v_axis, values)
             for a, b in _chunks(n_trials, workers)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=len(tasks)) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def evaluate(cfg: ExperimentConfig, method: str, setting: Setting, n_trials: int | None = None,
             seed: int | None = None, table: RiskTable | None = None, eta: float | None = None,
             workers: int = 1) -> EvalSummary:
    """Run ``n_trials`` seeded trials of ``method`` from ``setting``."""
    n_trials = cfg.n_trials if n_trials is None else n_trials
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    seed = cfg.seed if seed is None else seed
    table = resolve_table(cfg, method, table)
    if eta is not None:
        if not 0 < eta <= 1:
            raise ConfigError(f"eta must lie in (0, 1], got {eta}")
        safe_params = dataclasses.replace(cfg.controllers.safe, eta=float(eta))
        cfg = dataclasses.replace(cfg, controllers=dataclasses.replace(cfg.controllers, safe=safe_params))
    ctrl = make_controller(method, cfg, cfg.target_speed(setting.v_init), 1.0 - setting.one_minus_eps, table)
    safe, times = run_batch(cfg.scenario, ctrl, setting_seed(seed, setting), n_trials, cfg.t_end,
                            setting.x_init, setting.v_init, workers)
    k = int(safe.sum())
    lo, hi = wilson(k, n_trials)
    censored = int(np.sum((times >= cfg.t_end - 0.5 * cfg.scenario.dt) & (safe == 1)))
    return EvalSummary(method, setting.x_init, setting.v_init, setting.one_minus_eps, k / n_trials, lo, hi,
                       float(times.mean()), n_trials, censored, eta, safe, times)


def evaluate_all(cfg: ExperimentConfig, methods: Sequence[str] | None = None,
                 settings: Sequence[Setting] | None = None, n_trials: int | None = None, seed: int | None = None,
                 table: RiskTable | None = None, workers: int = 1) -> list[EvalSummary]:
    methods = cfg.methods if methods is None else methods
    settings = cfg.settings if settings is None else settings
    return [evaluate(cfg, m, s, n_trials, seed, table, workers=workers) for s in settings for m in methods]


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float  # mean(baseline) - mean(candidate)
    lower95: float  # one-sided 95% lower bound on mean_diff
    p_value: float  # bootstrap share of resamples with mean_diff <= 0
    significant: bool


def paired_bootstrap_less(candidate: np.ndarray, baseline: np.ndarray, seed: int = 0,
                          resamples: int = BOOTSTRAP_RESAMPLES) -> BootstrapResult:
    """One-sided paired bootstrap test of mean(candidate) < mean(baseline)."""
    candidate, baseline = np.asarray(candidate, float), np.asarray(baseline, float)
    if candidate.shape != baseline.shape or candidate.size == 0:
        raise ValueError("paired samples must be non-empty and the same length")
    d = baseline - candidate
    rng = np.random.default_rng(derive_seed(seed, BOOTSTRAP_KEY))
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    means = d[idx].mean(axis=1)
    lower = float(np.quantile(means, 0.05))
    return BootstrapResult(float(d.mean()), lower, float(np.mean(means <= 0.0)), lower > 0.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def check_epsilon_bound(s: EvalSummary, slack: float = 0.05) -> CheckResult:
    need = s.one_minus_eps - slack
    return CheckResult(f"epsilon-bound {setting_label(Setting(s.x_init, s.v_init, s.one_minus_eps))}",
                       s.wilson_lo >= need, f"wilson_lo={s.wilson_lo:.4f} need>={need:.4f} (P={s.p_safe:.3f})")


def check_efficiency(prop: EvalSummary, worst: EvalSummary, seed: int = 0) -> CheckResult:
    b = paired_bootstrap_less(prop.times, worst.times, seed)
    return CheckResult(
        f"efficiency {setting_label(Setting(prop.x_init, prop.v_init, prop.one_minus_eps))}", b.significant,
        f"t_proposed={prop.mean_t:.2f} t_worst={worst.mean_t:.2f} diff_lo95={b.lower95:.2f} p={b.p_value:.4f}",
    )


def check_exposure(pairs: Iterable[tuple[EvalSummary, EvalSummary]]) -> CheckResult:
    """Some setting where PID's upper Wilson bound sits below the proposed lower bound."""
    parts, ok = [], False
    for pid, prop in pairs:
        hit = pid.wilson_hi < prop.wilson_lo
        ok |= hit
        parts.append(f"({pid.x_init:g},{pid.v_init:g}) pid_hi={pid.wilson_hi:.3f} prop_lo={prop.wilson_lo:.3f}")
    return CheckResult("pid-exposure", ok, "; ".join(parts))


def embedded_checks(summaries: Sequence[EvalSummary], seed: int = 0) -> list[CheckResult]:
    by = {(s.method, s.x_init, s.v_init, s.one_minus_eps): s for s in summaries}
    out = [check_epsilon_bound(s) for s in summaries if s.method == "proposed"]
    pairs = []
    for (m, x, v, o), s in by.items():
        if m != "proposed":
            continue
        w = by.get(("worst_case", x, v, o))
        if w is not None:
            out.append(check_efficiency(s, w, seed))
        pid = by.get(("pid", x, v, o))
        if pid is not None:
            pairs.append((pid, s))
    if pairs:
        out.append(check_exposure(pairs))
    return out


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class SweepPoint:
    method: str
    mean_p_safe: float
    normalized_time: float


def tradeoff_sweep(summaries: Sequence[EvalSummary]) -> list[SweepPoint]:
    """Average P_safe and time as a share of each setting's slowest method."""
    settings = sorted({(s.x_init, s.v_init, s.one_minus_eps) for s in summaries})
    methods = list(dict.fromkeys(s.method for s in summaries))
    norm: dict[str, list[float]] = {m: [] for m in methods}
    psafe: dict[str, list[float]] = {m: [] for m in methods}
    for key in settings:
        group = [s for s in summaries if (s.x_init, s.v_init, s.one_minus_eps) == key]
        t_max = max(s.mean_t for s in group)
        for s in group:
            norm[s.method].append(s.mean_t / t_max if t_max > 0 else 1.0)
            psafe[s.method].append(s.p_safe)
    return [SweepPoint(m, float(np.mean(psafe[m])), float(np.mean(norm[m]))) for m in methods]


def alpha_ablation(cfg: ExperimentConfig, etas: Sequence[float] = ALPHA_ETAS, setting: Setting = ALPHA_SETTING,
                   n_trials: int = 100, seed: int | None = None, table: RiskTable | None = None,
                   workers: int = 1) -> list[EvalSummary]:
    for e in etas:
        if not 0 < e <= 1:
            raise ConfigError(f"eta must lie in (0, 1], got {e}")
    return [evaluate(cfg, "proposed", setting, n_trials, seed, table, eta=e, workers=workers) for e in etas]


@dataclass
class DistributionResult:
    name: str
    summary: EvalSummary
    trace: Trajectory


def distribution_ablation(cfg: ExperimentConfig, tables: dict[str, RiskTable], setting: Setting = ALPHA_SETTING,
                          n_trials: int = 100, seed: int | None = None, workers: int = 1) -> list[DistributionResult]:
    """Proposed controller under each arrival distribution with the table built for it.

    ``tables`` maps a distribution name ("1", "2", "3") to its table; a table
    built for another world is an error. The trace is trial 0 of the setting.
    """
    seed = cfg.seed if seed is None else seed
    out = []
    for name, table in tables.items():
        scenario = cfg.scenario.with_distribution(name)
        table.check_fingerprint(scenario, cfg.risk, strict=True)
        sub = dataclasses.replace(cfg, scenario=scenario)
        summary = evaluate(sub, "proposed", setting, n_trials, seed, table, workers=workers)
        ctrl = make_controller("proposed", sub, sub.target_speed(setting.v_init), 1.0 - setting.one_minus_eps, table)
        trace = run_trial(scenario, ctrl, sub.t_end, setting_seed(seed, setting), setting.x_init, setting.v_init).trajectory
        out.append(DistributionResult(name, summary, trace))
    return out


@dataclass(frozen=True)
class TrendResult:
    rho_p: dict  # v -> Spearman rho(psi, -p) over p <= p_cap
    rho_v: dict  # p -> Spearman rho(psi, v)
    passed: bool

    def lines(self) -> list[str]:
        out = [f"rho(psi,-p) at v={v:g}: {r:.3f} (need > 0.5)" for v, r in self.rho_p.items()]
        out += [f"rho(psi,v) at p={p:g}: {r:.3f} (need < -0.5)" for p, r in self.rho_v.items()]
        return out


def trend_check(table: RiskTable, speeds=(2.0, 6.0), positions=(-60.0, -120.0), p_cap: float = -10.0) -> TrendResult:
    """Rank correlations of the table along fixed-speed rows and fixed-position columns.

    A constant slice has no defined rank correlation; it is reported as NaN and fails.
    """
    from scipy.stats import spearmanr

    def rho(x, y):
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            return math.nan
        return float(spearmanr(x, y).statistic)

    def index(axis, x):
        i = int(np.argmin(np.abs(axis - x)))
        if not math.isclose(axis[i], x, abs_tol=1e-9):
            raise TableError(f"{x} is not a grid node")
        return i

    sel = table.p_axis <= p_cap
    rho_p = {v: rho(table.values[sel, index(table.v_axis, v)], -table.p_axis[sel]) for v in speeds}
    rho_v = {p: rho(table.values[index(table.p_axis, p), :], table.v_axis) for p in positions}
    passed = all(r > 0.5 for r in rho_p.values()) and all(r < -0.5 for r in rho_v.values())
    return TrendResult(rho_p, rho_v, passed)


def analytic_time(cfg: ExperimentConfig, method: str, setting: Setting) -> float:
    """Traveling time from ``setting`` in a pedestrian-free world, stepped at dt.

    Speed-holding methods reach ``safe_dist`` at the first step k with
    p0 + k*v*dt >= safe_dist; the planning method follows its own profile.
    """
    sc = cfg.scenario
    v = cfg.target_speed(setting.v_init)
    if method == "planning":
        pl = cfg.controllers.planning
        ctrl = PlanningController(v, sc.u_bounds, sc.dt, pl.stop_point, pl.decel, pl.dwell, pl.accel)
        return min(ctrl.profile_time(setting.x_init, setting.v_init, sc.safe_dist), cfg.t_end)
    if setting.v_init != v or v <= 0:
        raise ValueError("closed form needs the ego to start at its target speed")
    return min(math.ceil((sc.safe_dist - setting.x_init) / (v * sc.dt) - 1e-9) * sc.dt, cfg.t_end)
