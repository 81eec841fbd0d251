import csv
import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfkdlab import tensor as T
from dfkdlab.diffusion import plain_step, predict_z0, sample
from dfkdlab.guidance import (GuidanceConfig, GuidanceHook, Prompt, _sampling_order, bn_loss, energy,
                              energy_loss, guidance_losses, guided_step, scale_at, synthesize_dataset,
                              write_trace_csv)
from dfkdlab.tensor import Tensor
from helpers import max_fd_error

mpmath.mp.dps = 30


def lse_oracle(row, alpha=1.0):
    return float(alpha * mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v) / alpha) for v in row)))


# ----------------------------------------------------------------------------- energy and losses


def test_energy_examples():
    assert energy(np.zeros((1, 10))).data[0] == pytest.approx(-math.log(10), abs=1e-12)
    assert energy(np.array([[2.0, 0, 0]])).data[0] == pytest.approx(-lse_oracle([2, 0, 0]), abs=1e-12)
    assert round(float(energy(np.array([[2.0, 0, 0]])).data[0]), 6) == -2.239545
    assert energy(np.array([[0.0, 0.0]]), alpha=2.0).data[0] == pytest.approx(-2 * math.log(2), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)), st.floats(-50, 50))
def test_energy_shift_identity(x, c):
    np.testing.assert_allclose(energy(x + c).data, energy(x).data - c, atol=1e-9)


def test_energy_errors():
    with pytest.raises(ValueError):
        energy(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        energy(np.zeros((1, 2)), alpha=0.0)


def test_energy_loss_examples():
    out = energy_loss(np.array([[2.0, 0, 0]]), 0)
    assert float(out.data) == pytest.approx(-2 * lse_oracle([2, 0, 0]), abs=1e-12)
    assert round(float(out.data), 6) == -4.479090
    zero_target = energy_loss(np.array([[0.0, 5.0, -3.0], [0.0, 1.0, 2.0]]), [0, 0])
    assert float(zero_target.data) == 0.0
    with pytest.raises(ValueError):
        energy_loss(np.zeros((2, 3)), 3)
    with pytest.raises(ValueError):
        energy_loss(np.zeros((2, 3)), 0, target="margin")


def test_energy_loss_prob_target():
    x = np.array([[1.0, 0.0, -1.0]])
    p = np.exp(x[0]) / np.exp(x[0]).sum()
    assert float(energy_loss(x, 0, target="prob").data) == pytest.approx(-p[0] * lse_oracle(x[0]), abs=1e-12)


@pytest.mark.parametrize("target", ["logit", "prob"])
def test_energy_loss_gradient(target):
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.normal(0, 2, (4, 5))
        y = rng.integers(0, 5, 4)
        alpha = rng.uniform(0.5, 2.0)
        assert max_fd_error(lambda a: energy_loss(a, y, alpha, target), [x]) <= 1e-3


def test_bn_loss_examples():
    stats = [(np.array([0.5, -1.0]), np.array([2.0, 0.3]))]
    assert float(bn_loss(stats, stats).data) == 0.0
    assert float(bn_loss([(np.array([1.0]), np.array([1.0]))], [(np.array([0.0]), np.array([2.0]))]).data) == 2.0
    with pytest.raises(ValueError):
        bn_loss(stats, [])
    with pytest.raises(ValueError):
        bn_loss(stats, [(np.zeros(3), np.ones(3))])


def test_bn_loss_layer_permutation_invariance():
    rng = np.random.default_rng(1)
    layers = [(rng.normal(size=4), rng.random(4)) for _ in range(3)]
    runs = [(rng.normal(size=4), rng.random(4)) for _ in range(3)]
    perm = [2, 0, 1]
    a = float(bn_loss(layers, runs).data)
    b = float(bn_loss([layers[i] for i in perm], [runs[i] for i in perm]).data)
    assert a == pytest.approx(b, rel=1e-14)


def test_bn_loss_gradient():
    rng = np.random.default_rng(2)
    run = [(rng.normal(size=3), rng.random(3) + 0.5)]
    for _ in range(100):
        batch = rng.normal(size=(6, 3))
        fn = lambda b: bn_loss([T.batchnorm_stats(b)], run)  # noqa: E731
        assert max_fd_error(fn, [batch]) <= 1e-3


def test_scale_schedule_closed_form(small_stack):
    ab = small_stack.diffusion.schedule.alpha_bar
    for t in range(1, len(ab)):
        assert scale_at(0.7, t, ab) == 0.7 * math.sqrt(1.0 - ab[t])


# ----------------------------------------------------------------------------- config


def test_window_resolution_and_validation():
    assert GuidanceConfig().resolve_window(100) == (60, 0)
    assert GuidanceConfig().resolve_window(7) == (5, 0)
    with pytest.raises(ValueError):
        GuidanceConfig(tau_start=30).resolve_window(100)
    assert GuidanceConfig(tau_start=30, allow_early_window=True).resolve_window(100) == (30, 0)
    with pytest.raises(ValueError):
        GuidanceConfig(tau_start=80, tau_end=90).resolve_window(100)
    for bad in (dict(alpha=0.0), dict(rho0=-1.0), dict(grad_mode="x"), dict(batch_size=1), dict(batch_mixing="x")):
        with pytest.raises(ValueError):
            GuidanceConfig(**bad).validate()


# ----------------------------------------------------------------------------- guided step


def composed_objective(model, teacher, y, cond, t, which=("bn", "energy")):
    cfg = GuidanceConfig()

    def fn(z):
        losses = guidance_losses(z, t, model, teacher, y, cond, cfg)
        total = Tensor(0.0)
        for w in which:
            total = total + losses[w]
        return total
    return fn


def test_composed_guidance_gradient_through_decoder_and_eps(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    rng = np.random.default_rng(3)
    for i in range(100):
        t = int(rng.integers(1, model.schedule.T + 1))
        z = rng.standard_normal((4, model.d_z))
        y = rng.integers(0, 4, 4)
        cond = model.binding.combo_code(y, rng.integers(0, 3, 4), rng.integers(0, 2, 4))
        which = (("bn", "energy"), ("bn",), ("energy",))[i % 3]
        assert max_fd_error(composed_objective(model, teacher, y, cond, t, which), [z]) <= 1e-3


def test_guided_step_matches_manual_update(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    cfg = GuidanceConfig(rho0=0.3, gamma0=0.2, max_grad_norm=None)
    z = np.random.default_rng(4).standard_normal((5, model.d_z))
    y, t = np.arange(5) % 4, 6
    cond = model.binding.class_code(y)
    out, info = guided_step(z, t, model, teacher, y, cond, cfg, np.random.default_rng(9))
    from helpers import analytic_grads
    g_bn = analytic_grads(composed_objective(model, teacher, y, cond, t, ("bn",)), [z])[0]
    g_e = analytic_grads(composed_objective(model, teacher, y, cond, t, ("energy",)), [z])[0]
    plain = plain_step(model, z, t, cond, np.random.default_rng(9))
    ab = model.schedule.alpha_bar
    expect = plain - scale_at(0.3, t, ab) * g_bn - scale_at(0.2, t, ab) * g_e
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)
    assert set(info) == {"t", "L_BN", "L_E", "grad_norm_BN", "grad_norm_E"}


def test_gradient_clipping(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    z = np.random.default_rng(5).standard_normal((4, model.d_z))
    y = np.arange(4)
    cond = model.binding.class_code(y)
    base = plain_step(model, z, 5, cond, np.random.default_rng(0))
    out, info = guided_step(z, 5, model, teacher, y, cond, GuidanceConfig(rho0=0.0, gamma0=1.0, max_grad_norm=1e-3),
                            np.random.default_rng(0))
    gamma = scale_at(1.0, 5, model.schedule.alpha_bar)
    assert np.linalg.norm(base - out) == pytest.approx(gamma * 1e-3, rel=1e-9)
    assert info["grad_norm_E"] > 1e-3


def test_zero_scale_and_window_bit_exact_every_t():
    """Exhaustive over t for T=100 with tiny networks."""
    from dfkdlab.conditions import WorldBinding
    from dfkdlab.diffusion import DiffusionModel, NoiseSchedule
    from dfkdlab.nets import AutoencoderModel, ClassifierModel, NoisePredictorModel

    binding = WorldBinding(3, 2, 2)
    ae = AutoencoderModel(6, 3, seed=1)
    model = DiffusionModel(NoisePredictorModel(3, binding, width=8, depth=1, seed=2), NoiseSchedule.linear(100),
                           binding, ae)
    teacher = ClassifierModel(6, (5,), 3, seed=3)
    y = np.array([0, 1, 2, 0])
    cond = binding.class_code(y)
    inside = GuidanceConfig(rho0=0.5, gamma0=0.5, tau_start=70, tau_end=20)
    zero = GuidanceConfig(rho0=0.0, gamma0=0.0)
    z = np.random.default_rng(0).standard_normal((4, 3))
    for t in range(100, 0, -1):
        plain = plain_step(model, z, t, cond, np.random.default_rng(t))
        zs, info = guided_step(z, t, model, teacher, y, cond, zero, np.random.default_rng(t))
        assert np.array_equal(zs, plain) and info == {}
        zw, info = guided_step(z, t, model, teacher, y, cond, inside, np.random.default_rng(t))
        if 20 <= t <= 70:
            assert info and not np.array_equal(zw, plain)
        else:
            assert np.array_equal(zw, plain) and info == {}
        z = plain
    unguided = sample(model, cond, 4, seed=5)
    hooked = sample(model, cond, 4, seed=5, guidance=GuidanceHook(teacher, {int(c): int(k) for c, k in zip(cond, y)},
                                                                  zero))
    assert np.array_equal(unguided.z0, hooked.z0)


def test_guided_trajectory_equals_unguided_outside_window(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    cond = model.binding.class_code(np.arange(4))
    labels = {int(c): k for k, c in enumerate(cond)}
    cfg = GuidanceConfig(rho0=0.5, gamma0=0.5)
    start, _ = cfg.resolve_window(model.schedule.T)
    rng_a, rng_b = np.random.default_rng([1, 0]), np.random.default_rng([1, 0])
    za = zb = rng_a.standard_normal((4, model.d_z))
    rng_b.standard_normal((4, model.d_z))
    hook = GuidanceHook(teacher, labels, cfg)
    for t in range(model.schedule.T, start, -1):
        za = plain_step(model, za, t, cond, rng_a)
        zb, info = hook.step(model, zb, t, cond, rng_b)
        assert np.array_equal(za, zb) and info == {}


@pytest.mark.parametrize("target", ["logit", "prob"])
def test_energy_guidance_descends_its_objective(small_stack, target):
    model, teacher = small_stack.diffusion, small_stack.teacher
    cfg = GuidanceConfig(rho0=0.0, gamma0=1.0, target=target, max_grad_norm=None)
    y = small_stack.test.y[:16]
    cond = model.binding.class_code(y)
    z = np.random.default_rng(8).standard_normal((16, model.d_z))
    for t in range(1, 8):
        loss = lambda zz: float(guidance_losses(zz, t, model, teacher, y, cond, cfg)["energy"].data)  # noqa: E731
        plain = plain_step(model, z, t, cond, np.random.default_rng(t))
        guided, info = guided_step(z, t, model, teacher, y, cond, replace(cfg, gamma0=1e-4), np.random.default_rng(t))
        # guided_step subtracts gamma_t * grad, so moving z_t by the same shift lowers L_E
        assert loss(z - (plain - guided)) < loss(z)
        assert info["L_E"] == pytest.approx(loss(z), rel=1e-12)


# ----------------------------------------------------------------------------- synthesis


def test_sampling_order():
    prompts = [Prompt(10 + i, i // 2, i) for i in range(6)]
    runs = _sampling_order(prompts, 2, "class")
    assert [r.tolist() for r in runs] == [[0, 0, 1, 1], [2, 2, 3, 3], [4, 4, 5, 5]]
    mixed = _sampling_order(prompts, 2, "mixed")
    assert len(mixed) == 1
    assert mixed[0].tolist() == [0, 2, 4, 1, 3, 5, 0, 2, 4, 1, 3, 5]


def small_prompts(binding, nc=2, ns=2):
    return [Prompt(int(binding.combo_code(k, c, s)), k, (k * nc + c) * ns + s, c, s)
            for k in range(4) for c in range(nc) for s in range(ns)]


@pytest.mark.parametrize("mixing", ["mixed", "class"])
def test_synthesize_dataset_shape_and_provenance(small_stack, tmp_path, mixing):
    model, teacher = small_stack.diffusion, small_stack.teacher
    prompts = small_prompts(model.binding)
    trace = []
    cfg = GuidanceConfig(batch_size=8, batch_mixing=mixing)
    out = synthesize_dataset(model, teacher, prompts, 3, cfg, seed=1, trace=trace)
    assert len(out) == len(prompts) * 3 and out.synthetic
    np.testing.assert_array_equal(out.extras["prompt_id"], np.repeat([p.prompt_id for p in prompts], 3))
    np.testing.assert_array_equal(out.y, np.repeat([p.y for p in prompts], 3))
    assert np.isfinite(out.extras["final_L_BN"]).all() and np.isfinite(out.extras["final_L_E"]).all()
    start, end = cfg.resolve_window(model.schedule.T)
    n_batches = 6 if mixing == "mixed" else 4 * 2  # 48 samples, or 12 per class run
    assert len(trace) == n_batches * len(range(max(end, 1), start + 1))
    assert sorted({r["batch"] for r in trace}) == list(range(n_batches))
    write_trace_csv(tmp_path / "trace.csv", trace)
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert list(rows[0]) == ["batch", "t", "L_BN", "L_E", "grad_norm_BN", "grad_norm_E"]
    assert len(rows) == len(trace)
    again = synthesize_dataset(model, teacher, prompts, 3, cfg, seed=1)
    np.testing.assert_array_equal(out.x, again.x)


def test_synthesize_dataset_edge_cases(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    empty = synthesize_dataset(model, teacher, [], 5, GuidanceConfig())
    assert len(empty) == 0 and empty.x.shape == (0, 16)
    assert len(synthesize_dataset(model, teacher, small_prompts(model.binding), 0, None)) == 0
    clash = [Prompt(3, 0), Prompt(3, 1)]
    with pytest.raises(ValueError):
        synthesize_dataset(model, teacher, clash, 1, None)
    with pytest.raises(ValueError):
        synthesize_dataset(model, None, clash[:1], 1, GuidanceConfig())


def test_zero_scale_synthesis_equals_unguided(small_stack):
    model, teacher = small_stack.diffusion, small_stack.teacher
    prompts = small_prompts(model.binding)
    a = synthesize_dataset(model, teacher, prompts, 2, replace(GuidanceConfig(), rho0=0.0, gamma0=0.0), seed=2)
    b = synthesize_dataset(model, teacher, prompts, 2, None, seed=2)
    np.testing.assert_array_equal(a.x, b.x)
