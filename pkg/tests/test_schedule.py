import pytest
import torch
from hypothesis import given, settings, strategies as st

from cfedit.errors import SamplingDiverged, ShapeError, TimestepError
from cfedit.schedule import (NoiseSchedule, ddim_sample, ddim_step, forward_noise,
                             sampling_timesteps)


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear(1000)


def make_sched(alphas):
    return NoiseSchedule(alphas=torch.tensor(alphas, dtype=torch.float64))


class TestNoiseSchedule:
    def test_linear_invariants(self, sched):
        a = sched.alphas
        assert sched.T_max == 1000
        assert a[0] == 1.0
        assert torch.all(a > 0)
        assert torch.all(a[:-1] >= a[1:])

    def test_rejects_nonmonotone(self):
        with pytest.raises(ValueError):
            make_sched([1.0, 0.5, 0.7])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            make_sched([1.0, 0.0])

    def test_manifest_roundtrip(self, sched):
        again = NoiseSchedule.from_manifest(sched.to_manifest())
        assert torch.equal(again.alphas, sched.alphas)


class TestForwardNoise:
    def test_unit_alpha_is_identity(self):
        s = make_sched([1.0, 1.0, 0.5])
        x0 = torch.randn(3, 4, 4)
        out = forward_noise(x0, 1, torch.randn(3, 4, 4), s)
        assert torch.equal(out, x0)

    def test_zero_eps_scales_by_half(self):
        # hand substitution: alpha_bar = 0.25 -> sqrt = 0.5
        s = make_sched([1.0, 0.25])
        x0 = torch.randn(2, 5, 5)
        out = forward_noise(x0, 1, torch.zeros_like(x0), s)
        assert torch.allclose(out, 0.5 * x0)

    def test_zero_x0_scales_eps(self):
        # hand substitution: alpha_bar = 0.36 -> sqrt(1 - 0.36) = 0.8
        s = make_sched([1.0, 0.36])
        eps = torch.randn(3, 4, 4)
        out = forward_noise(torch.zeros_like(eps), 1, eps, s)
        assert torch.allclose(out, 0.8 * eps)

    def test_shape_mismatch(self, sched):
        with pytest.raises(ShapeError):
            forward_noise(torch.zeros(3, 4, 4), 1, torch.zeros(3, 4, 5), sched)

    def test_t_out_of_range(self, sched):
        with pytest.raises(TimestepError):
            forward_noise(torch.zeros(2, 2), 1001, torch.zeros(2, 2), sched)

    def test_does_not_mutate_inputs(self, sched):
        x0 = torch.randn(3, 4, 4)
        eps = torch.randn(3, 4, 4)
        x0c, epsc = x0.clone(), eps.clone()
        forward_noise(x0, 500, eps, sched)
        assert torch.equal(x0, x0c) and torch.equal(eps, epsc)


class TestDdimStep:
    def test_zero_pred_closed_form(self, sched):
        x_t = torch.randn(3, 8, 8)
        for t in [1, 17, 400, 1000]:
            out = ddim_step(x_t, t, torch.zeros_like(x_t), sched)
            ratio = (sched.alpha_bar(t - 1) / sched.alpha_bar(t)) ** 0.5
            assert torch.allclose(out, ratio * x_t, rtol=1e-6)

    def test_perfect_predictor_walks_back(self, sched):
        x0 = torch.rand(3, 8, 8) * 2 - 1
        eps = torch.randn(3, 8, 8)
        for t in torch.linspace(1, 1000, 50).round().int().tolist():
            x_t = forward_noise(x0, t, eps, sched)
            back = ddim_step(x_t, t, eps, sched)
            ref = forward_noise(x0, t - 1, eps, sched)
            assert torch.allclose(back, ref, rtol=1e-5, atol=1e-6), t

    def test_equal_alpha_degenerate(self):
        s = make_sched([1.0, 0.5, 0.5])
        x_t = torch.randn(2, 3, 3)
        out = ddim_step(x_t, 2, torch.zeros_like(x_t), s, t_prev=1)
        assert torch.allclose(out, x_t)

    def test_t_zero_rejected(self, sched):
        with pytest.raises(TimestepError):
            ddim_step(torch.zeros(2, 2), 0, torch.zeros(2, 2), sched)


class TestDdimSample:
    def test_zero_predictor_closed_form(self, sched):
        x_T = torch.randn(3, 6, 6)
        ts = sampling_timesteps(1000, 2)
        factor = 1.0
        for cur, nxt in zip(ts[:-1], ts[1:]):
            factor *= (sched.alpha_bar(nxt) / sched.alpha_bar(cur)) ** 0.5
        out = ddim_sample(x_T, 2, lambda x, t: torch.zeros_like(x), sched)
        assert torch.allclose(out, factor * x_T, rtol=1e-6)

    def test_deterministic(self, sched):
        x_T = torch.randn(3, 6, 6)
        predict = lambda x, t: 0.1 * x
        a = ddim_sample(x_T, 10, predict, sched)
        b = ddim_sample(x_T, 10, predict, sched)
        assert torch.equal(a, b)

    def test_full_steps_perfect_predictor_recovers_x0(self):
        s = NoiseSchedule.linear(50)
        x0 = torch.rand(3, 6, 6) * 2 - 1
        eps = torch.randn(3, 6, 6)
        x_T = forward_noise(x0, 50, eps, s)
        out = ddim_sample(x_T, 50, lambda x, t: eps, s)
        assert torch.allclose(out, x0, rtol=1e-4, atol=1e-5)

    def test_divergence_reports_timestep(self, sched):
        def explode(x, t):
            return torch.full_like(x, float("inf"))
        with pytest.raises(SamplingDiverged) as exc:
            ddim_sample(torch.randn(3, 4, 4), 4, explode, sched)
        assert 0 <= exc.value.timestep < 1000

    def test_steps_cap(self, sched):
        with pytest.raises(ValueError):
            ddim_sample(torch.randn(2, 2), 1001, lambda x, t: x, sched)

    def test_stride_ends_at_zero(self):
        for steps in (1, 7, 30, 100):
            ts = sampling_timesteps(1000, steps)
            assert ts[0] == 1000 and ts[-1] == 0
            assert len(ts) == steps + 1
            assert all(a > b for a, b in zip(ts[:-1], ts[1:]))


@settings(max_examples=50, deadline=None)
@given(t=st.integers(min_value=1, max_value=1000))
def test_forward_then_step_property(t):
    sched = NoiseSchedule.linear(1000)
    g = torch.Generator().manual_seed(t)
    x0 = torch.randn(3, 4, 4, generator=g)
    eps = torch.randn(3, 4, 4, generator=g)
    x_t = forward_noise(x0, t, eps, sched)
    back = ddim_step(x_t, t, eps, sched)
    ref = forward_noise(x0, t - 1, eps, sched)
    assert torch.allclose(back, ref, rtol=1e-5, atol=1e-6)
