"""Noise schedules, parameterisation conversions and TrigFlow wrapping.

All scalar schedule quantities are evaluated in float64 regardless of the
precision of the tensors they are applied to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

F64 = torch.float64
HALF_PI = math.pi / 2

ScalarFn = Callable[[torch.Tensor], torch.Tensor]


def _t64(t) -> torch.Tensor:
    return torch.as_tensor(t, dtype=F64)


@dataclass(frozen=True)
class NoiseSchedule:
    name: str
    alpha: ScalarFn
    sigma: ScalarFn
    dalpha: ScalarFn
    dsigma: ScalarFn
    t_domain: tuple[float, float]
    # closed-form inverse of sigma/alpha, if one exists
    snr_inverse: Optional[ScalarFn] = field(default=None, compare=False)
    unit_det: bool = False  # alpha*dsigma - sigma*dalpha == 1 identically

    def coefficients(self, t) -> tuple[torch.Tensor, ...]:
        t = _t64(t)
        return self.alpha(t), self.sigma(t), self.dalpha(t), self.dsigma(t)

    def ratio(self, t) -> torch.Tensor:
        """sigma/alpha, +inf where alpha vanishes."""
        t = _t64(t)
        a, s = self.alpha(t), self.sigma(t)
        return torch.where(a > 0, s / torch.where(a > 0, a, torch.ones_like(a)), torch.full_like(a, math.inf))


def trigflow() -> NoiseSchedule:
    return NoiseSchedule(
        "trigflow", torch.cos, torch.sin, lambda t: -torch.sin(t), torch.cos, (0.0, HALF_PI),
        snr_inverse=torch.atan, unit_det=True,
    )


def rectified_flow() -> NoiseSchedule:
    return NoiseSchedule(
        "rectified_flow", lambda t: 1 - t, lambda t: t, lambda t: -torch.ones_like(t), lambda t: torch.ones_like(t),
        (0.0, 1.0), snr_inverse=lambda r: r / (1 + r),
    )


def vp_linear(beta_min: float = 0.1, beta_max: float = 20.0) -> NoiseSchedule:
    """Continuous-time DDPM (variance preserving, linear beta). No closed-form SNR inverse."""
    db = beta_max - beta_min

    def log_a(t):
        return -0.25 * t * t * db - 0.5 * t * beta_min

    def dlog_a(t):
        return -0.5 * t * db - 0.5 * beta_min

    def alpha(t):
        return torch.exp(log_a(t))

    def sigma(t):
        return torch.sqrt(-torch.expm1(2 * log_a(t)))

    def dalpha(t):
        return alpha(t) * dlog_a(t)

    def dsigma(t):
        a, s = alpha(t), sigma(t)
        return -a * a * dlog_a(t) / torch.where(s > 0, s, torch.ones_like(s))

    return NoiseSchedule("vp_linear", alpha, sigma, dalpha, dsigma, (0.0, 1.0))


SCHEDULES = {"trigflow": trigflow, "rectified_flow": rectified_flow, "vp_linear": vp_linear}


# ---------------------------------------------------------------------------
# SNR matching

BISECTION_TOL = 1e-12
BISECTION_MAX_ITERS = 200


def snr_match(raw: NoiseSchedule, t) -> torch.Tensor:
    """Raw time whose sigma/alpha equals tan(t), in float64."""
    t = _t64(t)
    if torch.any((t < 0) | (t > HALF_PI)):
        raise ValueError("TrigFlow time must lie in [0, pi/2]")
    target = torch.tan(t)
    # tan(pi/2) in floating point is large but finite; treat it as infinite SNR ratio
    target = torch.where(t >= HALF_PI, torch.full_like(target, math.inf), target)
    lo_t, hi_t = raw.t_domain
    r_lo, r_hi = float(raw.ratio(lo_t)), float(raw.ratio(hi_t))
    if torch.any((target < r_lo) | (target > r_hi)):
        raise ValueError(
            f"tan(t) in [{float(target.min()):.6g}, {float(target.max()):.6g}] is outside the "
            f"{raw.name} SNR-ratio range [{r_lo:.6g}, {r_hi:.6g}]"
        )
    if raw.snr_inverse is not None:
        out = raw.snr_inverse(target)
        return torch.where(torch.isinf(target), torch.full_like(out, hi_t), out)
    lo = torch.full_like(target, lo_t)
    hi = torch.full_like(target, hi_t)
    for _ in range(BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        below = raw.ratio(mid) < target
        lo = torch.where(below, mid, lo)
        hi = torch.where(below, hi, mid)
        if float((hi - lo).max()) <= BISECTION_TOL * 1e-3:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# parameterisation conversions

PARAMETERIZATIONS = ("x0", "eps", "v", "score")


def _bcast(c: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim))


def convert_parameterization(value: torch.Tensor, frm: str, to: str, x_t: torch.Tensor,
                             sched: NoiseSchedule, t) -> torch.Tensor:
    """Convert a prediction between x0 / eps / v / score under ``x_t = alpha x0 + sigma eps``.

    ``v`` is ``dalpha x0 + dsigma eps``. ``t`` is the schedule's own time,
    scalar or one entry per leading batch element.
    """
    for p in (frm, to):
        if p not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {p!r}; expected one of {PARAMETERIZATIONS}")
    if frm == to:
        return value
    a, s, da, ds = (_bcast(c, value) for c in sched.coefficients(t))
    if torch.any(s == 0) and ({frm, to} & {"eps", "score"} or (frm == "x0" and to == "v")):
        raise ValueError(f"sigma(t)=0: cannot convert {frm} -> {to}")
    x = x_t.to(F64)
    y = value.to(F64)
    det = 1.0 if sched.unit_det else a * ds - s * da

    if frm == "x0" and to == "v":
        return ((ds * x - det * y) / s).to(value.dtype)

    if frm == "x0":
        x0 = y
        eps = (x - a * x0) / s
    elif frm == "eps":
        eps = y
        x0 = (x - s * eps) / a
    elif frm == "score":
        eps = -s * y
        x0 = (x - s * eps) / a
    else:  # v
        x0 = (ds * x - s * y) / det
        eps = (a * y - da * x) / det

    if to == "x0":
        out = x0
    elif to == "eps":
        out = eps
    elif to == "score":
        out = -eps / s
    else:
        out = da * x0 + ds * eps
    return out.to(value.dtype)


# ---------------------------------------------------------------------------
# wrapping


@dataclass(frozen=True)
class WrappedDenoiser:
    """TrigFlow view of a denoiser trained under ``raw_schedule``.

    ``raw_denoiser(x_raw, t_raw)`` returns an x0 prediction; ``t_raw`` is a
    float64 tensor with one entry per batch element.
    """

    raw_denoiser: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    raw_schedule: NoiseSchedule

    def denoise(self, x_t: torch.Tensor, t) -> torch.Tensor:
        return wrap_denoiser(self, x_t, t).f

    def velocity(self, x_t: torch.Tensor, t) -> torch.Tensor:
        res = wrap_denoiser(self, x_t, t)
        if res.F is None:
            raise ValueError("velocity undefined at t=0")
        return res.F


@dataclass(frozen=True)
class WrapResult:
    f: torch.Tensor
    F: Optional[torch.Tensor]
    velocity_defined: bool


def wrap_denoiser(w: WrappedDenoiser, x_t: torch.Tensor, t) -> WrapResult:
    t = _t64(t)
    if t.ndim == 0:
        t = t.expand(x_t.shape[0])
    t_raw = snr_match(w.raw_schedule, t)
    a, s, _, _ = w.raw_schedule.coefficients(t_raw)
    scale = _bcast(torch.sqrt(a * a + s * s), x_t)
    x_raw = (scale * x_t.to(F64)).to(x_t.dtype)
    f = w.raw_denoiser(x_raw, t_raw)
    if torch.any(t == 0):
        # zero noise: the clean point is x itself, whatever the raw net's round-off
        f = torch.where(_bcast(t == 0, x_t), x_t.to(f.dtype), f)
        return WrapResult(f, None, False)
    c, sn = _bcast(torch.cos(t), x_t), _bcast(torch.sin(t), x_t)
    F = ((c * x_t.to(F64) - f.to(F64)) / sn).to(x_t.dtype)
    return WrapResult(f, F, True)


def denoiser_from_velocity(raw_velocity: Callable, raw_schedule: NoiseSchedule) -> Callable:
    """Turn a raw-schedule velocity predictor into an x0 predictor."""

    def den(x_raw, t_raw):
        v = raw_velocity(x_raw, t_raw)
        return convert_parameterization(v, "v", "x0", x_raw, raw_schedule, t_raw)

    return den


# ---------------------------------------------------------------------------
# time distributions

TIME_KINDS = ("lognormal-arctan", "uniform-shifted-rf")


@dataclass(frozen=True)
class TimeDistSpec:
    """``lognormal-arctan``: ``t = arctan(scale * exp(z))``, ``z ~ N(mean, std^2)``.
    ``uniform-shifted-rf``: ``t_RF = a u / (1 + (a-1) u)``, ``t = arctan(t_RF / (1 - t_RF))``.
    """

    kind: str = "lognormal-arctan"
    mean: float = -0.8
    std: float = 1.6
    scale: float = 1.0
    shift: float = 5.0

    def __post_init__(self):
        if self.kind not in TIME_KINDS:
            raise ValueError(f"unknown time distribution {self.kind!r}; expected one of {TIME_KINDS}")
        if self.kind == "lognormal-arctan" and (self.std <= 0 or self.scale <= 0):
            raise ValueError("lognormal-arctan needs std > 0 and scale > 0")
        if self.kind == "uniform-shifted-rf" and self.shift <= 0:
            raise ValueError("uniform-shifted-rf needs shift > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TimeDistSpec":
        return cls(**d)

    def transform(self, draw: torch.Tensor) -> torch.Tensor:
        """Map a standard normal (lognormal) or uniform (shifted-RF) draw to time."""
        if self.kind == "lognormal-arctan":
            return torch.atan(self.scale * torch.exp(self.mean + self.std * draw))
        t_rf = self.shift * draw / (1 + (self.shift - 1) * draw)
        return torch.atan(t_rf / (1 - t_rf))

    def cdf(self, t) -> torch.Tensor:
        t = _t64(t)
        if self.kind == "lognormal-arctan":
            z = (torch.log(torch.tan(t) / self.scale) - self.mean) / self.std
            return 0.5 * torch.erfc(-z / math.sqrt(2))
        t_rf = torch.sin(t) / (torch.sin(t) + torch.cos(t))
        return t_rf / (self.shift - (self.shift - 1) * t_rf)


def sample_time(dist: TimeDistSpec, n: int, generator: torch.Generator) -> torch.Tensor:
    """``n`` float64 draws in the open interval (0, pi/2)."""
    if dist.kind == "lognormal-arctan":
        t = dist.transform(torch.randn(n, dtype=F64, generator=generator))
    else:
        u = torch.rand(n, dtype=F64, generator=generator)
        while torch.any(u == 0):
            bad = u == 0
            u[bad] = torch.rand(int(bad.sum()), dtype=F64, generator=generator)
        t = dist.transform(u)
    # exp overflow / underflow can reach the closed endpoints
    return t.clamp(min=torch.finfo(F64).tiny, max=math.nextafter(HALF_PI, 0.0))
