import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spcd.core import Dataset, MultiscaleConfig, SystemState
from spcd.diagnostics import empirical_moments, fit_order
from spcd.integrators import (
    DIVERGENCE_THRESHOLD,
    NoiseDraw,
    NoiseStream,
    averaged_drift_fn,
    averaged_step,
    chebyshev_amplification,
    chebyshev_stages,
    em_step,
    frozen_step,
    is_diverged,
    minibatch_step,
    run_trajectory,
    srock_step,
)
from spcd.models import FlatModel, GaussianMeanModel, MoGModel

G1 = GaussianMeanModel(1)


def cfg(**kw):
    base = dict(epsilon=1.0, delta=0.1, n_particles=1, stages=3)
    base.update(kw)
    return MultiscaleConfig(**base)


def noise(theta=0.0, z=0.0):
    return NoiseDraw(np.array([theta]), np.array([[z]]))


# ---------------------------------------------------------------- EM


def test_em_fixed_point():
    s = SystemState([2.0], [[2.0]])
    out = em_step(s, G1, Dataset([2.0]), cfg(), noise())
    np.testing.assert_array_equal(out.theta, [2.0])
    np.testing.assert_array_equal(out.particles, [[2.0]])
    assert out.time == pytest.approx(0.1)


def test_em_hand_step():
    s = SystemState([1.0], [[0.0]])
    out = em_step(s, G1, Dataset([0.0]), cfg(), noise())
    assert out.theta[0] == pytest.approx(1.0)
    assert out.particles[0, 0] == pytest.approx(0.1)
    out = em_step(s, G1, Dataset([0.0]), cfg(), noise(theta=1.0))
    assert out.theta[0] == pytest.approx(1 + math.sqrt(0.2))
    assert out.theta[0] == pytest.approx(1.4472, abs=1e-4)


# ---------------------------------------------------------------- S-ROCK


@pytest.mark.parametrize("m", [2, 3, 5, 8])
def test_srock_fixed_point(m):
    s = SystemState([0.7], [[0.7]])
    out = srock_step(s, G1, Dataset([0.7]), cfg(stages=m), noise())
    np.testing.assert_allclose(out.theta, [0.7], atol=1e-15)
    np.testing.assert_allclose(out.particles, [[0.7]], atol=1e-15)


def test_chebyshev_examples():
    for m in range(2, 11):
        assert chebyshev_amplification(m, 0.0) == 1.0
    assert chebyshev_amplification(2, 4.0) == pytest.approx(-1.0)
    assert chebyshev_amplification(2, 8.0) == pytest.approx(1.0)
    assert chebyshev_amplification(3, 18.0) == pytest.approx(-1.0)
    assert abs(chebyshev_amplification(3, 19.0)) > 1


@settings(max_examples=200)
@given(st.integers(2, 10), st.floats(0, 1))
def test_chebyshev_matches_stage_recursion(m, frac):
    p = frac * 2 * m * m
    lam = 3.0
    h = p / lam
    (u,) = chebyshev_stages(lambda v: (-lam * v,), (np.array(1.0),), h, m)
    assert float(u) == pytest.approx(chebyshev_amplification(m, p), abs=1e-12)
    assert abs(chebyshev_amplification(m, p)) <= 1 + 1e-12


@settings(max_examples=100)
@given(st.integers(2, 10), st.floats(1.001, 3))
def test_chebyshev_unstable_beyond_boundary(m, factor):
    assert abs(chebyshev_amplification(m, factor * 2 * m * m)) > 1


@pytest.mark.parametrize("m", [2, 3, 4, 7])
def test_srock_noise_only_is_doubled(m):
    flat = FlatModel()
    s = SystemState([0.0], [[0.0]])
    c = cfg(stages=m, delta=0.02, epsilon=0.5, n_particles=1)
    out = srock_step(s, flat, Dataset([0.0]), c, noise(1.0, 1.0))
    assert out.theta[0] == pytest.approx(2 * math.sqrt(0.02 / 2))
    assert out.particles[0, 0] == pytest.approx(2 * math.sqrt(0.02 / (2 * 0.5)))


def test_srock_rejects_single_stage():
    with pytest.raises(ValueError):
        chebyshev_stages(lambda v: (v,), (np.zeros(1),), 0.1, 1)


def test_srock_em_difference_order():
    """With matched noise the one-step difference shrinks like delta^(3/2) or faster."""
    model = MoGModel(np.ones(2), np.array([0.6, 1.0]))
    data = Dataset([-1.0, 0.5, 2.0])
    s = SystemState([-0.5, 1.0], [[0.3], [1.7]])
    rng = np.random.default_rng(0)
    xi = NoiseDraw(rng.standard_normal(2), rng.standard_normal((2, 1)))
    deltas = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    diffs = []
    for d in deltas:
        c = cfg(delta=float(d), epsilon=0.5, n_particles=2, stages=3)
        a, b = srock_step(s, model, data, c, xi), em_step(s, model, data, c, xi)
        diffs.append(np.sqrt(np.sum((a.theta - b.theta) ** 2) +
                             np.sum((a.particles - b.particles) ** 2)))
    assert fit_order(deltas, diffs).slope >= 1.4


def test_srock_mean_increment_weak_consistency():
    """Zero-noise increment minus delta * drift is O(delta^2)."""
    from spcd.integrators import _joint_drift

    model = MoGModel(np.ones(2), np.array([0.6, 1.0]))
    data = Dataset([-1.0, 0.5, 2.0])
    s = SystemState([-0.5, 1.0], [[0.3], [1.7]])
    zero = NoiseDraw.zeros(s)
    f_th, f_z = _joint_drift(model, data, 0.5, s.theta, s.particles)
    deltas = np.array([1e-2, 1e-3, 1e-4])
    res = []
    for d in deltas:
        out = srock_step(s, model, data, cfg(delta=float(d), epsilon=0.5, n_particles=2), zero)
        r_th = out.theta - s.theta - d * f_th
        r_z = out.particles - s.particles - d * f_z
        res.append(np.sqrt(np.sum(r_th**2) + np.sum(r_z**2)))
    assert fit_order(deltas, res).slope >= 1.9


@pytest.mark.parametrize("step", [em_step, srock_step], ids=["em", "srock"])
def test_permutation_equivariance(step):
    model = MoGModel(np.ones(2), np.array([0.6, 1.0]))
    data = Dataset([-1.0, 0.5, 2.0])
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, 1))
    xi = NoiseDraw(rng.standard_normal(2), rng.standard_normal((5, 1)))
    perm = rng.permutation(5)
    c = cfg(n_particles=5, delta=0.01, epsilon=0.3)
    a = step(SystemState([-0.5, 1.0], z), model, data, c, xi)
    b = step(SystemState([-0.5, 1.0], z[perm]), model, data, c,
             NoiseDraw(xi.theta_noise, xi.z_noise[perm]))
    np.testing.assert_allclose(a.theta, b.theta, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(a.particles[perm], b.particles, rtol=1e-13, atol=1e-14)


# ---------------------------------------------------------------- averaged / frozen


def test_averaged_step_examples():
    drift = averaged_drift_fn(G1, Dataset([2.0]))
    c = cfg(delta=0.5)
    assert averaged_step([2.0], drift, c, 0.0)[0] == 2.0
    assert averaged_step([0.0], drift, c, 0.0)[0] == pytest.approx(1.0)


def test_averaged_step_rejects_model_without_drift():
    with pytest.raises(ValueError):
        averaged_drift_fn(FlatModel(), Dataset([0.0]))


def test_averaged_chain_stationary_variance():
    """Small-step averaged chain for N=4 is close to Normal(ybar, 1/N)."""
    drift = averaged_drift_fn(G1, Dataset([1.0, 3.0]))
    c = cfg(delta=0.01, n_particles=4)
    rng = np.random.default_rng(0)
    th = np.full(4000, 2.0)
    for _ in range(600):
        th = averaged_step(th[:, None], drift, c, rng.standard_normal((4000, 1)))[:, 0]
    # exact EM variance for this chain is (1/N) / (1 - delta/2)
    exact = 0.25 / (1 - 0.005)
    assert abs(th.mean() - 2.0) < 4 * math.sqrt(exact / 4000)
    assert th.var() == pytest.approx(exact, rel=4 * math.sqrt(2 / 4000))


def test_frozen_step_examples():
    c = cfg(delta=0.1, epsilon=0.001)
    s = SystemState([0.0], [[0.0]])
    assert frozen_step(s, G1, c, noise()).particles[0, 0] == 0.0
    s = SystemState([0.0], [[2.0]])
    assert frozen_step(s, G1, c, noise()).particles[0, 0] == pytest.approx(1.8)
    assert frozen_step(s, G1, c, noise()).theta[0] == 0.0


def test_frozen_long_run_law():
    c = cfg(delta=0.01)
    R = 5000
    stream = NoiseStream(3, (R, 1), (R, 1, 1), block=64)
    s = SystemState(np.full((R, 1), 1.5), np.zeros((R, 1, 1)))
    for n in range(800):
        s = frozen_step(s, G1, c, stream.draw(n))
    x = s.particles[:, 0, 0]
    var = 1 / (1 - 0.005)
    assert abs(x.mean() - 1.5) < 4 * math.sqrt(var / R)
    assert x.var() == pytest.approx(var, rel=4 * math.sqrt(2 / R))


# ---------------------------------------------------------------- noise


def test_noise_stream_counter_based():
    a = NoiseStream(11, (2,), (3, 1), block=8)
    b = NoiseStream(11, (2,), (3, 1), block=8)
    late = a.draw(37)
    for n in range(40):
        b.draw(n)
    np.testing.assert_array_equal(late.theta_noise, b.draw(37).theta_noise)
    np.testing.assert_array_equal(late.z_noise, b.draw(37).z_noise)
    c = NoiseStream(11, (2,), (3, 1), replica=1, block=8)
    assert not np.array_equal(late.theta_noise, c.draw(37).theta_noise)
    # subsystems are independent streams
    assert not np.array_equal(a.draw(0).theta_noise, a.draw(0).z_noise[:2, 0])


def test_noise_stream_moments():
    s = NoiseStream(0, (1,), (1, 1), block=4096)
    x = np.concatenate([s.block_arrays(i)[0].ravel() for i in range(50)])
    assert abs(x.mean()) < 4 / math.sqrt(x.size)
    assert x.var() == pytest.approx(1.0, abs=4 * math.sqrt(2 / x.size))


# ---------------------------------------------------------------- driver


def test_horizon_zero_keeps_initial_state():
    s = SystemState([0.3], [[0.1]])
    rec = run_trajectory("em", s, G1, Dataset([0.0]), cfg(horizon=0.0))
    assert rec.theta_samples.shape == (1, 1)
    assert rec.theta_samples[0, 0] == 0.3
    assert rec.n_accumulated == 0


@pytest.mark.parametrize("integ", ["em", "srock"])
def test_same_seed_same_record(integ):
    model = MoGModel(np.ones(2), np.array([0.6, 1.0]))
    s = SystemState([-0.5, 1.0], [[0.3], [1.7]])
    c = cfg(delta=0.01, epsilon=0.2, n_particles=2, horizon=0.5, seed=99)
    a = run_trajectory(integ, s, model, Dataset([0.0, 1.0]), c)
    b = run_trajectory(integ, s, model, Dataset([0.0, 1.0]), c)
    np.testing.assert_array_equal(a.theta_samples, b.theta_samples)
    np.testing.assert_array_equal(a.final_state.particles, b.final_state.particles)


@pytest.mark.parametrize("integ", ["em", "srock"])
def test_fast_path_matches_generic_kernels(integ):
    data = Dataset([1.0, 3.0])
    s = SystemState(np.zeros((3, 1)), np.zeros((3, 2, 1)))
    c = cfg(delta=0.01, epsilon=0.1, n_particles=2, horizon=30.0, seed=5, burn_in=100,
            thinning=7)
    fast = run_trajectory(integ, s, G1, data, c)
    slow = run_trajectory(integ, s, G1, data, c, fast=False)
    np.testing.assert_allclose(fast.theta_samples, slow.theta_samples, rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(fast.times, slow.times, rtol=1e-12)
    assert fast.n_accumulated == slow.n_accumulated
    for key in fast.moment_sums:
        np.testing.assert_allclose(fast.moment_sums[key], slow.moment_sums[key], rtol=1e-10)


@pytest.mark.parametrize("fast", [True, False])
def test_divergence_is_reported(fast):
    # EM far beyond its stability limit
    s = SystemState([1.0], [[-1.0]])
    c = cfg(delta=0.01, epsilon=0.001, horizon=10.0)
    rec = run_trajectory("em", s, G1, Dataset([0.0]), c, noise_scale=0.0, fast=fast)
    assert rec.diverged
    assert rec.diverged_step is not None and rec.diverged_step < c.n_steps
    assert is_diverged(SystemState([2 * DIVERGENCE_THRESHOLD], [[0.0]]))
    assert is_diverged(SystemState([np.nan], [[0.0]]))
    assert not is_diverged(SystemState([DIVERGENCE_THRESHOLD], [[0.0]]))


def test_observers_see_recorded_states():
    seen = []
    c = cfg(delta=0.1, horizon=1.0, thinning=2)
    run_trajectory("em", SystemState([0.0], [[0.0]]), G1, Dataset([1.0]), c,
                   observers=[lambda n, st: seen.append(n)])
    assert seen == [0, 2, 4, 6, 8, 10]


def test_em_long_run_mean():
    c = cfg(delta=0.01, epsilon=0.1, horizon=4000.0, seed=2, thinning=5, burn_in=1000)
    rec = run_trajectory("em", SystemState([0.0], [[0.0]]), G1, Dataset([1.0, 3.0]), c)
    st = empirical_moments(rec.theta_samples[1:, 0])
    assert abs(st["mean"] - 2.0) < 3 * st["mean_se"]


def test_minibatch_step_reproducible_and_full_when_large():
    data = Dataset(np.arange(10.0))
    s = SystemState([0.0], [[0.0]])
    c = cfg(delta=0.1)
    full = em_step(s, G1, data, c, noise())
    big = minibatch_step(em_step, 50, 0)(s, G1, data, c, noise())
    np.testing.assert_array_equal(full.theta, big.theta)
    small = minibatch_step(em_step, 3, 0)
    a, b = small(s, G1, data, c, noise()), small(s, G1, data, c, noise())
    np.testing.assert_array_equal(a.theta, b.theta)
    assert a.theta[0] != full.theta[0]
