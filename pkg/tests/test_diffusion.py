import math

import numpy as np
import pytest

from dfkdlab.conditions import WorldBinding
from dfkdlab.diffusion import (DiffusionModel, NoiseSchedule, ScheduleError, forward_diffuse, predict_z0, sample,
                               sampler_step, step_mean)
from dfkdlab.nets import AutoencoderModel, NoisePredictorModel
from dfkdlab.tensor import Tensor

HALF = NoiseSchedule(np.array([1.0, 0.5, 0.25]), eta=0.0)


def test_linear_schedule_defaults():
    s = NoiseSchedule.linear()
    assert s.T == 100 and s.eta == 1.0 and s.alpha_bar[0] == 1.0
    betas = 1.0 - s.alpha_bar[1:] / s.alpha_bar[:-1]
    assert betas[0] == pytest.approx(1e-3) and betas[-1] == pytest.approx(0.2)
    np.testing.assert_allclose(np.diff(betas), np.diff(betas)[0])


@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
def test_schedule_invariants_hold_for_every_step(eta):
    s = NoiseSchedule.linear(100, eta)
    a = s.alpha_bar
    assert np.all(np.diff(a) < 0) and np.all(a[1:] > 0)
    for t in range(1, s.T + 1):
        assert 0.0 <= s.sigma2(t) <= 1.0 - a[t - 1] + 1e-15


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.5, 0.6]))
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([0.9, 0.5]))
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.5]), eta=1.5)
    with pytest.raises(ScheduleError):
        forward_diffuse([1.0], 3, [0.0], HALF)


def test_forward_diffuse_examples():
    assert forward_diffuse([2.0], 2, [1.0], HALF)[0] == pytest.approx(1 + math.sqrt(0.75), abs=1e-15)
    assert round(forward_diffuse([2.0], 2, [1.0], HALF)[0], 4) == 1.8660
    assert forward_diffuse([3.0], 1, [0.0], HALF)[0] == math.sqrt(0.5) * 3.0
    nearly_one = NoiseSchedule(np.array([1.0, np.nextafter(1.0, 0.0)]))
    assert forward_diffuse([2.0], 1, [5.0], nearly_one)[0] == pytest.approx(2.0, abs=1e-7)
    with pytest.raises(ValueError):
        forward_diffuse([1.0, 2.0], 1, [1.0], HALF)


def test_predict_z0_examples():
    assert predict_z0(np.array([1.0]), 2, np.array([0.2]), HALF)[0] == pytest.approx(
        (1 - math.sqrt(0.75) * 0.2) / 0.5, abs=1e-15)
    assert round(predict_z0(np.array([1.0]), 2, np.array([0.2]), HALF)[0], 5) == 1.65359
    nearly_one = NoiseSchedule(np.array([1.0, np.nextafter(1.0, 0.0)]))
    assert predict_z0(np.array([1.5]), 1, np.array([9.0]), nearly_one)[0] == pytest.approx(1.5, abs=1e-6)


def test_predict_z0_inverts_forward_diffusion():
    s = NoiseSchedule.linear()
    rng = np.random.default_rng(0)
    for t in range(1, s.T + 1):
        z0, eps = rng.standard_normal(5), rng.standard_normal(5)
        back = predict_z0(forward_diffuse(z0, t, eps, s), t, eps, s)
        np.testing.assert_allclose(back, z0, atol=1e-12 / math.sqrt(s.alpha_bar[t]) * 10)


def test_predict_z0_accepts_tensors():
    out = predict_z0(Tensor([1.0]), 2, Tensor([0.2]), HALF)
    assert isinstance(out, Tensor)
    assert out.data[0] == pytest.approx(predict_z0(np.array([1.0]), 2, np.array([0.2]), HALF)[0], abs=1e-15)


def test_deterministic_step_example():
    rng = np.random.default_rng(0)
    out = sampler_step(np.array([1.0]), 2, np.array([0.2]), HALF, rng)
    z0 = (1 - math.sqrt(0.75) * 0.2) / 0.5
    assert out[0] == pytest.approx(math.sqrt(0.5) * z0 + math.sqrt(0.5) * 0.2, abs=1e-14)
    assert round(out[0], 5) == 1.31069
    again = sampler_step(np.array([1.0]), 2, np.array([0.2]), HALF, np.random.default_rng(99))
    assert again[0] == out[0]


def test_step_rejects_inconsistent_schedule():
    s = NoiseSchedule(np.array([1.0, 0.5, 0.25]), eta=1.0)
    s.eta = 2.0  # bypass validation to force 1 - a_{t-1} - sigma^2 < 0
    with pytest.raises(ScheduleError):
        step_mean(np.array([1.0]), 2, np.array([0.0]), s)


def test_stochastic_step_mean_monte_carlo():
    s = NoiseSchedule(np.array([1.0, 0.5, 0.25]), eta=1.0)
    n = 10000
    z = np.full((n, 1), 1.0)
    eps = np.full((n, 1), 0.2)
    out = sampler_step(z, 2, eps, s, np.random.default_rng(1))
    mu, s2 = step_mean(z[:1], 2, eps[:1], s)
    assert abs(out.mean() - mu[0, 0]) <= 4 * math.sqrt(s2 / n)
    assert abs(out.var() - s2) <= 4 * s2 * math.sqrt(2 / (n - 1))


def exact_gaussian_eps(mu, s2):
    """Optimal noise predictor for a corpus N(mu, s2 I)."""
    def eps(z_t, t, schedule):
        a = schedule.alpha_bar[t]
        return math.sqrt(1 - a) / (a * s2 + 1 - a) * (z_t - math.sqrt(a) * mu)
    return eps


def run_exact_sampler(schedule, mu, s2, n, seed):
    eps = exact_gaussian_eps(mu, s2)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, len(mu)))
    for t in range(schedule.T, 0, -1):
        z = sampler_step(z, t, eps(z, t, schedule), schedule, rng)
    return z


def linear_recursion_moments(schedule, mu, s2):
    """Exact moments of the sampler when eps is affine in z_t (independent derivation)."""
    m, v = 0.0, 1.0
    for t in range(schedule.T, 0, -1):
        a, a_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
        k = math.sqrt(1 - a) / (a * s2 + 1 - a)
        sig2 = schedule.eta ** 2 * (1 - a_prev) / (1 - a) * (1 - a / a_prev)
        c0 = math.sqrt(a_prev) / math.sqrt(a)
        c1 = math.sqrt(1 - a_prev - sig2) - math.sqrt(a_prev) * math.sqrt(1 - a) / math.sqrt(a)
        # z_{t-1} = c0 z + c1 k (z - sqrt(a) mu) + sigma xi
        m = (c0 + c1 * k) * m - c1 * k * math.sqrt(a) * mu
        v = (c0 + c1 * k) ** 2 * v + sig2
    return m, v


@pytest.mark.parametrize("eta", [1.0, 0.0])
@pytest.mark.parametrize("s2", [0.25, 1.0])
def test_analytic_score_sampler_matches_target(eta, s2):
    # T=1000: the fixed posterior-variance reverse kernel has a discretization bias that
    # only drops below Monte-Carlo resolution at fine step counts
    mu, n = np.array([1.0, -2.0]), 10000
    z = run_exact_sampler(NoiseSchedule.linear(1000, eta), mu, s2, n, seed=2)
    assert np.all(np.abs(z.mean(axis=0) - mu) <= 4 * math.sqrt(s2 / n))
    assert np.all(np.abs(z.var(axis=0, ddof=1) - s2) <= 4 * s2 * math.sqrt(2 / (n - 1)))


@pytest.mark.parametrize("eta", [1.0, 0.0])
def test_exact_sampler_matches_discrete_recursion_at_default_steps(eta):
    schedule = NoiseSchedule.linear(100, eta)
    mu, s2, n = np.array([1.0, -2.0]), 0.25, 10000
    z = run_exact_sampler(schedule, mu, s2, n, seed=3)
    for d in range(2):
        m, v = linear_recursion_moments(schedule, mu[d], s2)
        assert abs(z[:, d].mean() - m) <= 4 * math.sqrt(v / n)
        assert abs(z[:, d].var(ddof=1) - v) <= 4 * v * math.sqrt(2 / (n - 1))


@pytest.fixture(scope="module")
def tiny_model():
    binding = WorldBinding(2, 2, 2)
    pred = NoisePredictorModel(3, binding, width=8, depth=2, seed=1)
    ae = AutoencoderModel(5, 3, seed=2)
    ae.meta["trained"] = True
    return DiffusionModel(pred, NoiseSchedule.linear(20), binding, ae)


def test_sample_is_independent_of_workers(tiny_model):
    a = sample(tiny_model, [0, 1, 2, 3, 4, 5, 6], 7, seed=3, batch_size=3)
    b = sample(tiny_model, [0, 1, 2, 3, 4, 5, 6], 7, seed=3, batch_size=3, workers=3)
    np.testing.assert_array_equal(a.z0, b.z0)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.x.shape == (7, 5)


def test_sample_empty_and_seeded(tiny_model):
    empty = sample(tiny_model, 0, 0)
    assert empty.z0.shape == (0, 3) and empty.x.shape == (0, 5)
    a = sample(tiny_model, 1, 4, seed=1)
    b = sample(tiny_model, 1, 4, seed=2)
    assert not np.array_equal(a.z0, b.z0)


def test_diffusion_checkpoint_roundtrip(tmp_path, tiny_model):
    tiny_model.save(tmp_path / "d.prsm")
    back = DiffusionModel.load(tmp_path / "d.prsm", tiny_model.autoencoder)
    np.testing.assert_array_equal(back.schedule.alpha_bar, tiny_model.schedule.alpha_bar)
    np.testing.assert_array_equal(sample(back, 2, 3, seed=4).z0, sample(tiny_model, 2, 3, seed=4).z0)
