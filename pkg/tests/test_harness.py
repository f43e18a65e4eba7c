import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from occsafe.config import ConfigError, ExperimentConfig, Setting
from occsafe.harness import (
    ALPHA_ETAS,
    EvalSummary,
    MissingTableError,
    alpha_ablation,
    analytic_time,
    check_epsilon_bound,
    check_exposure,
    distribution_ablation,
    embedded_checks,
    evaluate,
    paired_bootstrap_less,
    setting_seed,
    tradeoff_sweep,
    trend_check,
    wilson,
)
from occsafe.kernels import R_ACTIVE, R_PSI, R_U, R_UNOM
from occsafe.risk import TableError, policy_fingerprint

from helpers import no_arrivals, sigmoid, synthetic_table

Z = stats.norm.ppf(0.975)


def wilson_oracle(k, n):
    """Roots of (p - k/n)^2 = z^2 p (1 - p) / n."""
    ph = k / n
    a = 1 + Z**2 / n
    b = -(2 * ph + Z**2 / n)
    c = ph**2
    r = np.sort(np.roots([a, b, c]).real)
    return max(0.0, r[0]), min(1.0, r[1])


@pytest.mark.parametrize("k,n", [(49, 50), (0, 1), (1, 1), (0, 50), (37, 80)])
def test_wilson_closed_form(k, n):
    lo, hi = wilson(k, n)
    olo, ohi = wilson_oracle(k, n)
    assert lo == pytest.approx(olo, abs=1e-9) and hi == pytest.approx(ohi, abs=1e-9)


def test_wilson_known_values():
    lo, hi = wilson(49, 50)
    assert lo == pytest.approx(0.8950, abs=5e-4) and hi == pytest.approx(0.9965, abs=5e-4)
    lo, hi = wilson(0, 1)
    assert lo == 0.0 and hi == pytest.approx(Z**2 / (1 + Z**2), abs=1e-12)


@given(n=st.integers(1, 2000), data=st.data())
def test_wilson_brackets_estimate(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


# -- evaluate ---------------------------------------------------------------------

LOGISTIC = synthetic_table(lambda P, V: sigmoid(-0.05 * (P + 60) - 0.8 * (V - 6)))


def small_cfg(**kw):
    return dataclasses.replace(ExperimentConfig(), t_end=40.0, **kw)


@pytest.mark.parametrize("method", ["proposed", "worst_case", "planning", "pid", "cruise"])
def test_no_arrivals_all_safe(method):
    cfg = small_cfg(scenario=no_arrivals())
    s = evaluate(cfg, method, Setting(-60.0, 2.0, 0.9), 5, table=LOGISTIC)
    assert s.p_safe == 1.0 and s.n_trials == 5


@given(seed=st.integers(0, 2**31))
def test_single_trial_summary(seed):
    s = evaluate(small_cfg(), "pid", Setting(-60.0, 8.0, 0.9), 1, seed=seed)
    assert s.p_safe in (0.0, 1.0)
    assert 0.0 <= s.wilson_lo <= s.p_safe <= s.wilson_hi <= 1.0
    assert s.wilson_hi > s.wilson_lo


def test_missing_table_names_build_command():
    with pytest.raises(MissingTableError, match="occsafe build-table"):
        evaluate(small_cfg(), "proposed", Setting(-60.0, 2.0, 0.9), 2)
    with pytest.raises(ConfigError):
        evaluate(small_cfg(), "pid", Setting(-60.0, 2.0, 0.9), 0)


def test_evaluate_reproducible_and_worker_independent():
    cfg = small_cfg()
    s = Setting(-60.0, 6.0, 0.9)
    a = evaluate(cfg, "proposed", s, 30, seed=9, table=LOGISTIC)
    b = evaluate(cfg, "proposed", s, 30, seed=9, table=LOGISTIC)
    c = evaluate(cfg, "proposed", s, 30, seed=9, table=LOGISTIC, workers=3)
    assert a == b == c
    assert np.array_equal(a.times, c.times) and np.array_equal(a.safe, c.safe)


def test_mean_time_includes_collided_trials():
    cfg = small_cfg()
    s = evaluate(cfg, "pid", Setting(-40.0, 8.0, 0.9), 60, seed=2)
    assert s.p_safe < 1.0
    assert s.mean_t == pytest.approx(s.times.mean())
    assert s.mean_t < cfg.t_end


def test_settings_share_worlds_across_epsilon():
    assert setting_seed(3, Setting(-60.0, 2.0, 0.9)) == setting_seed(3, Setting(-60.0, 2.0, 0.95))
    assert setting_seed(3, Setting(-60.0, 2.0, 0.9)) != setting_seed(3, Setting(-60.0, 3.0, 0.9))


def test_trivial_world_matches_closed_form_time():
    cfg = small_cfg(scenario=no_arrivals(), track_initial_speed=True)
    for method, setting in [("cruise", Setting(-60.0, 6.0, 0.9)), ("pid", Setting(-37.0, 7.0, 0.9)),
                            ("planning", Setting(-60.0, 2.0, 0.9))]:
        s = evaluate(cfg, method, setting, 1)
        assert abs(s.mean_t - analytic_time(cfg, method, setting)) <= 2 * cfg.scenario.dt


# -- statistics ---------------------------------------------------------------------


def test_bootstrap_detects_clear_difference():
    rng = np.random.default_rng(0)
    base = rng.normal(30, 1, 200)
    r = paired_bootstrap_less(base - 2.0, base)
    assert r.significant and r.mean_diff == pytest.approx(2.0) and r.p_value == 0.0


def test_bootstrap_identical_samples_not_significant():
    x = np.linspace(10, 20, 50)
    r = paired_bootstrap_less(x, x)
    assert not r.significant and r.mean_diff == 0.0
    with pytest.raises(ValueError):
        paired_bootstrap_less(x, x[:-1])


def test_bootstrap_is_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0, 1, 40), rng.normal(0.2, 1, 40)
    assert paired_bootstrap_less(a, b, 5) == paired_bootstrap_less(a, b, 5)


def summary(method, p_safe, mean_t, x=-60.0, v=2.0, o=0.9, n=100):
    k = round(p_safe * n)
    lo, hi = wilson(k, n)
    return EvalSummary(method, x, v, o, k / n, lo, hi, mean_t, n,
                       safe=np.r_[np.ones(k), np.zeros(n - k)].astype(np.int8), times=np.full(n, mean_t))


def test_checks_pass_and_fail():
    assert check_epsilon_bound(summary("proposed", 1.0, 20.0)).passed
    assert not check_epsilon_bound(summary("proposed", 0.7, 20.0)).passed
    assert check_exposure([(summary("pid", 0.5, 10.0), summary("proposed", 1.0, 20.0))]).passed
    assert not check_exposure([(summary("pid", 0.99, 10.0), summary("proposed", 1.0, 20.0))]).passed
    checks = embedded_checks([summary("proposed", 1.0, 20.0), summary("worst_case", 1.0, 30.0),
                              summary("pid", 0.5, 10.0)])
    assert [c.passed for c in checks] == [True, True, True]
    assert checks[0].line().startswith("PASS ")


def test_tradeoff_identical_methods_coincide():
    pts = tradeoff_sweep([summary("a", 0.9, 20.0), summary("b", 0.9, 20.0),
                          summary("a", 0.8, 30.0, x=-120.0), summary("b", 0.8, 30.0, x=-120.0)])
    assert pts[0].mean_p_safe == pts[1].mean_p_safe and pts[0].normalized_time == pts[1].normalized_time == 1.0


def test_tradeoff_normalizes_by_setting_max():
    pts = {p.method: p for p in tradeoff_sweep([summary("a", 1.0, 10.0), summary("b", 0.5, 20.0),
                                                 summary("a", 1.0, 30.0, x=-120.0),
                                                 summary("b", 0.5, 40.0, x=-120.0)])}
    assert pts["a"].normalized_time == pytest.approx((0.5 + 0.75) / 2)
    assert pts["b"].normalized_time == 1.0 and pts["b"].mean_p_safe == 0.5


def test_tradeoff_single_method():
    pts = tradeoff_sweep([summary("a", 1.0, 10.0), summary("a", 1.0, 0.0, x=-120.0)])
    assert len(pts) == 1 and np.isfinite(pts[0].normalized_time)


# -- ablations ----------------------------------------------------------------------------


def test_alpha_ablation_rejects_bad_eta():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            alpha_ablation(small_cfg(), etas=(0.2, bad), n_trials=1, table=LOGISTIC)


def test_alpha_ablation_shape():
    out = alpha_ablation(small_cfg(scenario=no_arrivals()), n_trials=2, table=LOGISTIC)
    assert [s.eta for s in out] == list(ALPHA_ETAS) and all(s.p_safe == 1.0 for s in out)


def test_distribution_ablation_fingerprints():
    cfg = small_cfg()
    good = synthetic_table(lambda P, V: 1.0 + 0 * P, fingerprint=policy_fingerprint(no_arrivals(), cfg.risk))
    with pytest.raises(TableError):
        distribution_ablation(cfg, {"1": good}, n_trials=1)
    (res,) = distribution_ablation(cfg, {"3": good}, n_trials=3)
    assert res.summary.p_safe == 1.0
    tr = res.trace
    # no-risk world: output equals the nominal cruise command at every step
    steps = tr.rec[:-1]  # the terminal row carries no command
    assert np.all(steps[:, R_PSI] == 1.0) and np.all(steps[:, R_ACTIVE] == 0)
    assert np.array_equal(steps[:, R_U], steps[:, R_UNOM])


# -- trend ------------------------------------------------------------------------------


def test_trend_check_monotone_field_passes():
    t = synthetic_table(lambda P, V: sigmoid(0.03 * (-P) - 0.7 * V + 2.0))
    r = trend_check(t)
    assert r.passed and all(v > 0.5 for v in r.rho_p.values())


def test_trend_check_constant_slice_fails():
    t = synthetic_table(lambda P, V: 1.0 + 0 * P)
    r = trend_check(t)
    assert not r.passed and all(math.isnan(v) for v in r.rho_p.values())
