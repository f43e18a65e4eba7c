import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from occsafe.config import ScenarioConfig, SpawnDistribution
from occsafe.kernels import NO_SPAWN
from occsafe.sampling import (
    SamplingError,
    conditioned_spawn_matrix,
    derive_seed,
    sample_truncated_normal,
    sample_truncated_normal_block,
    spawn_step_matrix,
    spawn_steps,
    spawn_times,
    trial_rng,
    trial_spawn_steps,
)


def truncated_mean_by_quadrature(d: SpawnDistribution) -> float:
    pdf = stats.norm(d.mean, d.std).pdf
    mass = integrate.quad(pdf, d.lower, d.upper)[0]
    return integrate.quad(lambda x: x * pdf(x), d.lower, d.upper)[0] / mass


@pytest.mark.parametrize("dist", [SpawnDistribution(1.5, 2.5, 0.0, 10.0), SpawnDistribution(6.0, 2.5, 0.0, 15.0)])
def test_truncated_normal_mean_and_bounds(dist):
    x = sample_truncated_normal_block(np.random.default_rng(0), dist, 100_000)
    assert x.min() >= dist.lower and x.max() <= dist.upper
    assert abs(x.mean() - truncated_mean_by_quadrature(dist)) < 0.1


def test_scalar_sampler_matches_bounds():
    rng = np.random.default_rng(1)
    dist = SpawnDistribution(6.0, 2.5, 0.0, 15.0)
    draws = [sample_truncated_normal(rng, dist) for _ in range(2000)]
    assert 0.0 <= min(draws) and max(draws) <= 15.0
    assert abs(np.mean(draws) - truncated_mean_by_quadrature(dist)) < 0.2


def test_degenerate_interval():
    d = SpawnDistribution(0.0, 1.0, 0.0, 0.0)
    assert sample_truncated_normal(np.random.default_rng(0), d) == 0.0
    assert np.all(sample_truncated_normal_block(np.random.default_rng(0), d, 5) == 0.0)


def test_negligible_mass_fails():
    d = SpawnDistribution(0.0, 1.0, 50.0, 51.0)
    with pytest.raises(SamplingError):
        sample_truncated_normal(np.random.default_rng(0), d, max_rejections=100)
    with pytest.raises(SamplingError):
        sample_truncated_normal_block(np.random.default_rng(0), d, 3, max_rejections=100)


@given(mean=st.floats(-5, 20), std=st.floats(0.1, 10), lower=st.floats(-5, 10), width=st.floats(0, 10),
       seed=st.integers(0, 2**32))
def test_block_samples_respect_truncation(mean, std, lower, width, seed):
    d = SpawnDistribution(mean, std, lower, lower + width)
    try:
        x = sample_truncated_normal_block(np.random.default_rng(seed), d, 50, max_rejections=20_000)
    except SamplingError:
        return
    assert np.all((x >= d.lower) & (x <= d.upper))


@given(seed=st.integers(0, 2**40), trial=st.integers(0, 10_000))
def test_spawn_gaps_respect_truncation(seed, trial):
    sc = ScenarioConfig()
    t = spawn_times(trial_rng(seed, trial), sc, 60.0)
    gaps = np.diff(t)
    assert np.all((gaps >= sc.subsequent_spawn.lower) & (gaps <= sc.subsequent_spawn.upper))
    first = t[0] + sc.arrival_warmup
    assert sc.first_spawn.lower <= first <= sc.first_spawn.upper


def test_derive_seed_is_counter_based():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    seeds = {derive_seed(0, i, j) for i in range(20) for j in range(20)}
    assert len(seeds) == 400
    assert derive_seed(0, 1) != derive_seed(1, 1)


def test_trial_streams_independent_of_batching():
    sc = ScenarioConfig()
    whole = spawn_step_matrix(sc, 9, 40, 20.0)
    tail = spawn_step_matrix(sc, 9, 10, 20.0, first_trial=30)
    assert np.array_equal(whole[30:, : tail.shape[1]], tail)
    assert np.all(whole[30:, tail.shape[1]:] == NO_SPAWN)
    assert np.array_equal(trial_spawn_steps(sc, 9, 3, 20.0), whole[3][whole[3] != NO_SPAWN])


def test_spawn_steps_sorted_and_live():
    sc = ScenarioConfig()
    for n in range(50):
        s = trial_spawn_steps(sc, 4, n, 30.0)
        assert np.all(np.diff(s) > 0)
        y0 = sc.ped_spawn_point[1] - sc.ped_speed * ((0 - s) * sc.dt)
        assert np.all(y0 >= sc.ped_despawn_y)


def test_time_to_step_rounding():
    sc = ScenarioConfig()
    assert list(spawn_steps([0.0, 0.05, 0.051, 0.1 - 1e-12], sc)) == [0, 1, 2, 2]


def test_disabled_arrivals_give_no_pedestrians():
    sc = ScenarioConfig().with_distribution("3")
    assert trial_spawn_steps(sc, 0, 0, 100.0).size == 0


def test_warmup_zero_first_spawn_forced():
    sc = dataclasses.replace(ScenarioConfig(), first_spawn=SpawnDistribution(0.0, 1.0, 0.0, 0.0), arrival_warmup=0.0)
    assert trial_spawn_steps(sc, 0, 0, 10.0)[0] == 0


def test_conditioned_matrix_deterministic_and_filtered():
    sc = ScenarioConfig()

    def accept(m):
        return (m[:, 0] % 2) == 0

    a = conditioned_spawn_matrix(sc, 5, 30, 10.0, accept, 10_000)
    b = conditioned_spawn_matrix(sc, 5, 30, 10.0, accept, 10_000)
    assert np.array_equal(a, b) and a.shape[0] == 30
    assert np.all(a[:, 0] % 2 == 0)
    with pytest.raises(SamplingError):
        conditioned_spawn_matrix(sc, 5, 30, 10.0, lambda m: np.zeros(len(m), bool), 50)
