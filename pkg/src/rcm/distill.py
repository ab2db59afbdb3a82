"""Training objectives: sCM tangent and loss, DMD, flow matching, sCTM.

Losses follow one reduction convention: squared L2 norm over every non-batch
dimension, averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

F64 = torch.float64


def _col(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=F64)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    return t.reshape(t.shape + (1,) * (like.ndim - 1)).to(like.dtype)


def per_sample_norm(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x.reshape(x.shape[0], -1), dim=1)


def batch_sq_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).reshape(a.shape[0], -1).sum(dim=1).mean()


@dataclass(frozen=True)
class TangentPacket:
    F_sg: torch.Tensor
    dfdt_weighted: torch.Tensor  # cos(t) sin(t) dF/dt
    F_teacher: torch.Tensor
    x_t: torch.Tensor
    t: torch.Tensor


@dataclass(frozen=True)
class WarmupState:
    r: float

    @classmethod
    def at(cls, i: int, H: int) -> "WarmupState":
        return cls(1.0 if H <= 0 else min(1.0, i / H))

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"warmup factor must lie in [0, 1], got {self.r}")


def time_derivative_semicontinuous(net, x_t: torch.Tensor, t, dt: float = 1e-4,
                                   cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``(cos(dt) F(x, t) - F(x, t - dt)) / sin(dt)``, a first-order estimate of dF/dt at fixed x."""
    t = torch.as_tensor(t, dtype=F64)
    if t.ndim == 0:
        t = t.expand(x_t.shape[0])
    if torch.any(t <= dt):
        raise ValueError(f"semi-continuous derivative needs t > dt={dt}")
    with torch.no_grad():
        f_now = net(x_t, t, cond)
        f_prev = net(x_t, t - dt, cond)
    return (math.cos(dt) * f_now - f_prev) / math.sin(dt)


def tangent_packet(student, teacher_velocity: Callable, x_t: torch.Tensor, t: torch.Tensor,
                   cond: Optional[torch.Tensor] = None, time_derivative: str = "exact",
                   dt: float = 1e-4) -> TangentPacket:
    """Evaluate the teacher and the student JVP along ``cos(t) sin(t) (F_teacher, 1)``.

    ``time_derivative="semi"`` keeps the x-directional part exact and replaces
    the partial time derivative by :func:`time_derivative_semicontinuous`.
    """
    with torch.no_grad():
        F_t = teacher_velocity(x_t, t, cond)
    cs64 = torch.cos(t) * torch.sin(t)
    cs = _col(cs64, F_t)
    if time_derivative == "exact":
        F_sg, dF = student.forward_jvp(x_t, t, cond, cs * F_t, cs64)
    elif time_derivative == "semi":
        F_sg, dF = student.forward_jvp(x_t, t, cond, cs * F_t, torch.zeros_like(cs64))
        dF = dF + cs * time_derivative_semicontinuous(student, x_t, t, dt, cond).to(dF.dtype)
    else:
        raise ValueError(f"time_derivative must be 'exact' or 'semi', got {time_derivative!r}")
    return TangentPacket(F_sg=F_sg, dfdt_weighted=dF, F_teacher=F_t.to(F_sg.dtype), x_t=x_t.to(F_sg.dtype), t=t)


def scm_tangent(p: TangentPacket, w: WarmupState) -> torch.Tensor:
    """Warmed-up tangent target ``g`` (the teacher-ODE tangent of f, weighted by cos t)."""
    t = torch.as_tensor(p.t, dtype=F64)
    c64, s64 = torch.cos(t), torch.sin(t)
    r = w.r
    coef_a = _col(-c64 * torch.sqrt(1 - r * r * s64 * s64), p.F_sg)
    cs = _col(c64 * s64, p.F_sg)
    return coef_a * (p.F_sg - p.F_teacher) - r * (cs * p.x_t + p.dfdt_weighted)


def scm_loss(F_live: torch.Tensor, F_sg: torch.Tensor, g: torch.Tensor, c: float = 0.1) -> torch.Tensor:
    """``|| F_live - F_sg - g / (||g|| + c) ||^2`` with a per-sample norm."""
    if c <= 0:
        raise ValueError("normalisation constant c must be positive")
    g = g.detach()
    norm = per_sample_norm(g).reshape((-1,) + (1,) * (g.ndim - 1))
    target = (F_sg.detach() + g / (norm + c)).detach()
    return batch_sq_error(F_live, target)


@dataclass(frozen=True)
class DmdResult:
    loss: torch.Tensor
    floored: bool  # some per-sample normaliser hit the 1e-8 floor


def dmd_loss(x0_gen: torch.Tensor, f_fake: torch.Tensor, f_teacher: torch.Tensor,
             floor: float = 1e-8) -> DmdResult:
    """Gradient-injection form of the DMD regulariser.

    The value equals ``||(f_fake - f_teacher) / n||^2`` and the gradient with
    respect to ``x0_gen`` is ``2 (f_fake - f_teacher) / n`` per sample, with
    ``n = mean|x0_gen - f_teacher|``.
    """
    if not (x0_gen.shape == f_fake.shape == f_teacher.shape):
        raise ValueError("x0_gen, f_fake and f_teacher must share one shape")
    with torch.no_grad():
        x0 = x0_gen.detach()
        n = (x0 - f_teacher).abs().reshape(x0.shape[0], -1).mean(dim=1)
        floored = bool(torch.any(n < floor))
        n = n.clamp_min(floor).reshape((-1,) + (1,) * (x0.ndim - 1))
        target = x0 - (f_fake - f_teacher) / n
    return DmdResult(batch_sq_error(x0_gen, target), floored)


def flow_matching_loss(F_fake: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Regression onto the TrigFlow velocity ``cos(t) eps - sin(t) x0``."""
    c, s = _col(torch.cos(torch.as_tensor(t, dtype=F64)), x0), _col(torch.sin(torch.as_tensor(t, dtype=F64)), x0)
    v = c * eps - s * x0
    return batch_sq_error(F_fake, v.to(F_fake.dtype))


# ---------------------------------------------------------------------------
# trajectory (sCTM) objective


def trajectory_head(F: torch.Tensor, x_t: torch.Tensor, t, s) -> torch.Tensor:
    """``cos(t - s) x_t - sin(t - s) F``."""
    d = torch.as_tensor(t, dtype=F64) - torch.as_tensor(s, dtype=F64)
    return _col(torch.cos(d), F) * x_t - _col(torch.sin(d), F) * F


def sctm_tangent(F_sg: torch.Tensor, dFdt: torch.Tensor, dxdt: torch.Tensor, x_t: torch.Tensor, t, s) -> torch.Tensor:
    """d/dt of the trajectory function along the ODE, with ``s`` held fixed."""
    d = torch.as_tensor(t, dtype=F64) - torch.as_tensor(s, dtype=F64)
    return -_col(torch.cos(d), F_sg) * (F_sg - dxdt) - _col(torch.sin(d), F_sg) * (x_t + dFdt)


def sctm_loss(net, x_t: torch.Tensor, t, s, teacher: Union[Callable, torch.Tensor],
              cond: Optional[torch.Tensor] = None, weight: Optional[Callable] = None,
              c: Optional[float] = None) -> torch.Tensor:
    """Instantaneous consistency-trajectory objective.

    ``teacher`` is either a velocity callable ``(x_t, t, cond)`` or the
    per-sample ODE direction itself. ``weight(t, s)`` defaults to
    ``cos(t - s)``; ``c`` enables tangent normalisation.
    """
    B = x_t.shape[0]
    t = torch.as_tensor(t, dtype=F64).expand(B)
    s = torch.as_tensor(s, dtype=F64).expand(B)
    if torch.any(s > t) or torch.any(s < 0):
        raise ValueError("sCTM needs 0 <= s <= t")
    with torch.no_grad():
        dxdt = teacher(x_t, t, cond) if callable(teacher) else teacher
        F_sg, dF = net.forward_jvp(x_t, t, cond, dxdt, torch.ones_like(t), s=s)
    w = weight(t, s) if weight is not None else torch.cos(t - s)
    g = _col(w, F_sg) * sctm_tangent(F_sg, dF, dxdt.to(F_sg.dtype), x_t.to(F_sg.dtype), t, s)
    if c is not None:
        g = g / (per_sample_norm(g).reshape((-1,) + (1,) * (g.ndim - 1)) + c)
    F_live = net(x_t, t, cond, s=s)
    return batch_sq_error(F_live, (F_sg + g).detach())
