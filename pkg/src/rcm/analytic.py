"""Closed-form Gaussian models used as oracles.

For isotropic Gaussian data ``x0 ~ N(mu, std^2 I)`` under TrigFlow every
object of interest (denoiser, PF-ODE velocity, consistency function,
trajectory function) is available in closed form. Derivatives are taken with
``torch.func.jvp`` so these oracles share no code with the dual engine.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch.func import jvp

F64 = torch.float64


def _col(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=F64)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    return t.reshape(t.shape + (1,) * (like.ndim - 1))


@dataclass(frozen=True)
class GaussianData:
    mean: torch.Tensor  # [D]
    std: float

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return self.mean + self.std * torch.randn(n, self.dim, dtype=F64, generator=generator)

    def marginal_std(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=F64)
        return torch.sqrt(torch.cos(t) ** 2 * self.std ** 2 + torch.sin(t) ** 2)

    # -- TrigFlow quantities ---------------------------------------------------

    def denoiser(self, x: torch.Tensor, t) -> torch.Tensor:
        t = _col(t, x)
        c = torch.cos(t)
        var = c * c * self.std ** 2 + torch.sin(t) ** 2
        return self.mean + c * self.std ** 2 / var * (x - c * self.mean)

    def velocity(self, x: torch.Tensor, t) -> torch.Tensor:
        """PF-ODE velocity ``E[cos(t) eps - sin(t) x0 | x_t]``."""
        t = _col(t, x)
        c, s = torch.cos(t), torch.sin(t)
        var = c * c * self.std ** 2 + s * s
        return c * s / var * (x - c * self.mean) - s * self.denoiser(x, t.reshape(-1))

    def score(self, x: torch.Tensor, t) -> torch.Tensor:
        t = _col(t, x)
        c = torch.cos(t)
        var = c * c * self.std ** 2 + torch.sin(t) ** 2
        return -(x - c * self.mean) / var

    def consistency(self, x: torch.Tensor, t) -> torch.Tensor:
        """Endpoint of the PF-ODE trajectory through ``(x, t)``."""
        t = _col(t, x)
        c = torch.cos(t)
        return self.mean + self.std / torch.sqrt(c * c * self.std ** 2 + torch.sin(t) ** 2) * (x - c * self.mean)

    def consistency_velocity(self, x: torch.Tensor, t) -> torch.Tensor:
        """``F`` with ``cos(t) x - sin(t) F`` equal to the consistency function (t > 0)."""
        tc = _col(t, x)
        return (torch.cos(tc) * x - self.consistency(x, t)) / torch.sin(tc)

    def trajectory(self, x: torch.Tensor, t, s) -> torch.Tensor:
        """PF-ODE solution at time ``s`` from ``(x, t)``."""
        tc, sc = _col(t, x), _col(s, x)
        sd_t = torch.sqrt(torch.cos(tc) ** 2 * self.std ** 2 + torch.sin(tc) ** 2)
        sd_s = torch.sqrt(torch.cos(sc) ** 2 * self.std ** 2 + torch.sin(sc) ** 2)
        return torch.cos(sc) * self.mean + sd_s / sd_t * (x - torch.cos(tc) * self.mean)

    def trajectory_velocity(self, x: torch.Tensor, t, s) -> torch.Tensor:
        tc, sc = _col(t, x), _col(s, x)
        return (torch.cos(tc - sc) * x - self.trajectory(x, t, s)) / torch.sin(tc - sc)

    # -- raw-schedule teacher --------------------------------------------------

    def rf_denoiser(self, x_raw: torch.Tensor, t_raw) -> torch.Tensor:
        """Posterior mean under rectified flow, ``x = (1 - t) x0 + t eps``."""
        tr = _col(t_raw, x_raw)
        a, s = 1 - tr, tr
        return self.mean + a * self.std ** 2 / (a * a * self.std ** 2 + s * s) * (x_raw - a * self.mean)


class AnalyticNet:
    """Network-shaped wrapper around a closed-form velocity ``fn(x, t[, s])``.

    Offers ``forward``/``__call__`` and ``forward_jvp`` with the same
    signatures as :class:`rcm.model.VelocityNet` so it can stand in for a
    student, teacher or fake-score network.
    """

    def __init__(self, fn, with_s: bool = False, num_classes: int = 0):
        self.fn = fn
        self.with_s = with_s
        self.null_index = num_classes
        self.dtype = F64

    def __call__(self, x_t, t, cond=None, s=None):
        return self.forward(x_t, t, cond, s)

    def forward(self, x_t, t, cond=None, s=None):
        t = torch.as_tensor(t, dtype=F64)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        args = (x_t.to(F64), t) + ((torch.as_tensor(s, dtype=F64).expand(x_t.shape[0]),) if self.with_s else ())
        return self.fn(*args)

    def forward_jvp(self, x_t, t, cond, tx, tt, s: Optional[torch.Tensor] = None):
        B = x_t.shape[0]
        t = torch.as_tensor(t, dtype=F64).expand(B).clone()
        tt = torch.as_tensor(tt, dtype=F64).expand(B).clone()
        if self.with_s:
            s_full = torch.as_tensor(s, dtype=F64).expand(B)
            return jvp(lambda x, tm: self.fn(x, tm, s_full), (x_t.to(F64), t), (tx.to(F64), tt))
        return jvp(self.fn, (x_t.to(F64), t), (tx.to(F64), tt))

    def parameters(self):
        return iter(())
