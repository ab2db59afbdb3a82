import math

import pytest
import torch
from scipy import stats

from rcm.analytic import GaussianData
from rcm.schedule import (PARAMETERIZATIONS, TimeDistSpec, WrappedDenoiser, convert_parameterization, rectified_flow,
                          sample_time, snr_match, trigflow, vp_linear, wrap_denoiser)

D = torch.float64


def test_rf_closed_form_endpoints():
    assert float(snr_match(rectified_flow(), 0.0)) == 0.0
    assert float(snr_match(rectified_flow(), math.pi / 4)) == pytest.approx(0.5, abs=1e-15)


def test_vp_bisection_residual_and_grid_oracle():
    sched = vp_linear()
    t = torch.tensor([0.05, 0.3, 0.7, 1.2, 1.5], dtype=D)
    tr = snr_match(sched, t)
    assert float((sched.ratio(tr) - torch.tan(t)).abs().max()) <= 1e-12
    grid = torch.linspace(1e-9, 1.0, 200_001, dtype=D)
    ratios = sched.ratio(grid)
    for ti, tri in zip(t.tolist(), tr.tolist()):
        brute = float(grid[torch.argmin((ratios - math.tan(ti)).abs())])
        assert abs(brute - tri) <= 1e-5


@pytest.mark.parametrize("make", [trigflow, rectified_flow, vp_linear])
def test_snr_match_monotone(make):
    t = torch.linspace(0.01, 1.5, 60, dtype=D)
    tr = snr_match(make(), t)
    assert bool(torch.all(tr[1:] > tr[:-1]))


def test_snr_match_out_of_range():
    with pytest.raises(ValueError, match="TrigFlow time"):
        snr_match(rectified_flow(), 2.0)


def test_wrap_identity_on_trigflow(gen):
    x = torch.randn(5, 3, dtype=D, generator=gen)
    den = lambda xr, tr: 0.3 * xr + torch.cos(tr)[:, None]
    w = WrappedDenoiser(den, trigflow())
    t = torch.rand(5, dtype=D, generator=gen) + 0.1
    assert torch.equal(w.denoise(x, t), den(x, t))


def test_wrap_rf_hand_value(gen):
    seen = {}

    def den(xr, tr):
        seen["x"], seen["t"] = xr, tr
        return xr

    x = torch.randn(2, 2, dtype=D, generator=gen)
    wrap_denoiser(WrappedDenoiser(den, rectified_flow()), x, math.pi / 4)
    assert torch.allclose(seen["t"], torch.full((2,), 0.5, dtype=D), atol=1e-15, rtol=0)
    assert torch.allclose(seen["x"], math.sqrt(0.5) * x, atol=1e-15, rtol=0)


def test_wrapped_velocity_matches_analytic(gen):
    data = GaussianData(torch.tensor([0.6, -0.3], dtype=D), 0.7)
    w = WrappedDenoiser(data.rf_denoiser, rectified_flow())
    x = torch.randn(64, 2, dtype=D, generator=gen)
    for t in torch.linspace(0.02, 1.55, 50, dtype=D).tolist():
        assert float((w.velocity(x, t) - data.velocity(x, t)).abs().max()) <= 1e-8


def test_wrap_boundary_t0(gen):
    w = WrappedDenoiser(lambda xr, tr: xr, rectified_flow())
    x = torch.randn(3, 2, dtype=D, generator=gen)
    res = wrap_denoiser(w, x, 0.0)
    assert res.F is None and not res.velocity_defined
    assert torch.equal(res.f, x)


@pytest.mark.parametrize("make", [trigflow, rectified_flow, vp_linear])
def test_round_trips(gen, make):
    sched = make()
    lo, hi = sched.t_domain
    t = lo + (hi - lo) * (0.1 + 0.8 * torch.rand(16, dtype=D, generator=gen))
    x = torch.randn(16, 3, dtype=D, generator=gen)
    for a in PARAMETERIZATIONS:
        y = torch.randn(16, 3, dtype=D, generator=gen)
        for b in PARAMETERIZATIONS:
            back = convert_parameterization(convert_parameterization(y, a, b, x, sched, t), b, a, x, sched, t)
            assert float((back - y).abs().max()) <= 1e-12, (a, b)


def test_trigflow_v_from_x0_recovers_F(gen):
    x = torch.randn(8, 2, dtype=D, generator=gen)
    F = torch.randn(8, 2, dtype=D, generator=gen)
    t = torch.rand(8, dtype=D, generator=gen) + 0.2
    f = torch.cos(t)[:, None] * x - torch.sin(t)[:, None] * F
    back = convert_parameterization(f, "x0", "v", x, trigflow(), t)
    assert float((back - F).abs().max()) <= 1e-14


def test_sigma_zero_rejected(gen):
    x = torch.randn(2, 2, dtype=D, generator=gen)
    with pytest.raises(ValueError, match="sigma"):
        convert_parameterization(x, "x0", "eps", x, rectified_flow(), 0.0)


def test_shifted_rf_half():
    d = TimeDistSpec("uniform-shifted-rf", shift=5.0)
    assert float(d.transform(torch.tensor(0.5, dtype=D))) == pytest.approx(math.atan(5.0), abs=1e-14)
    assert float(d.transform(torch.tensor(0.0, dtype=D))) == 0.0


def test_lognormal_median():
    d = TimeDistSpec("lognormal-arctan", -0.8, 1.6)
    assert float(d.transform(torch.tensor(0.0, dtype=D))) == pytest.approx(math.atan(math.exp(-0.8)), abs=1e-15)
    assert float(d.cdf(math.atan(math.exp(-0.8)))) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("spec", [TimeDistSpec("lognormal-arctan", -0.8, 1.6),
                                  TimeDistSpec("lognormal-arctan", 0.0, 1.6),
                                  TimeDistSpec("uniform-shifted-rf", shift=5.0),
                                  TimeDistSpec("lognormal-arctan", -0.8, 1.6, scale=3.0)])
def test_sample_time_ks(spec):
    t = sample_time(spec, 100_000, torch.Generator().manual_seed(3))
    assert bool(torch.all((t > 0) & (t < math.pi / 2)))
    ks = stats.kstest(t.numpy(), lambda v: spec.cdf(torch.as_tensor(v, dtype=D)).numpy()).statistic
    assert ks <= 0.01


def test_time_dist_validation():
    with pytest.raises(ValueError):
        TimeDistSpec("beta")
    with pytest.raises(ValueError):
        TimeDistSpec("lognormal-arctan", std=0.0)
    with pytest.raises(ValueError):
        TimeDistSpec("uniform-shifted-rf", shift=-1.0)


def test_wrap_boundary_exact_for_analytic_teacher(gen):
    data = GaussianData(torch.tensor([0.6, -0.3], dtype=D), 0.7)
    x = torch.randn(32, 2, dtype=D, generator=gen)
    assert torch.equal(wrap_denoiser(WrappedDenoiser(data.rf_denoiser, rectified_flow()), x, 0.0).f, x)
