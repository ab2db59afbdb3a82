"""Samplers, distribution metrics and the single-vs-double precision study."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .model import CfgSpec, cfg_velocity, consistency_apply

F64 = torch.float64
HALF_PI = math.pi / 2

FOUR_STEP_TAIL = (1.3, 1.0, 0.6)
EIGHT_STEP_TAIL = (1.3, 1.0, 1.0, 0.6, 0.6, 0.3, 0.3)


@dataclass(frozen=True)
class SampleSchedule:
    """Timesteps of a multistep consistency sampler, largest first.

    Entries may repeat (the published 8-step list does); any increase is rejected.
    """

    timesteps: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if not ts:
            raise ValueError("schedule needs at least one timestep")
        if not all(0.0 < t <= HALF_PI for t in ts):
            raise ValueError(f"timesteps must lie in (0, pi/2], got {ts}")
        if any(b > a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timesteps must not increase, got {ts}")

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.timesteps, self.timesteps[1:]))

    @classmethod
    def from_sigma_max(cls, sigma_max: float, steps: int) -> "SampleSchedule":
        if sigma_max <= 0:
            raise ValueError("sigma_max must be positive")
        if not 1 <= steps <= 1 + len(EIGHT_STEP_TAIL):
            raise ValueError(f"steps must be in [1, {1 + len(EIGHT_STEP_TAIL)}], got {steps}")
        tail = FOUR_STEP_TAIL if steps <= 1 + len(FOUR_STEP_TAIL) else EIGHT_STEP_TAIL
        return cls((math.atan(sigma_max),) + tail[: steps - 1])


def _velocity_fn(net, cond, cfg: Optional[CfgSpec]) -> Callable:
    if cfg is None or cond is None:
        return lambda x, t: net(x, t, cond)
    return lambda x, t: cfg_velocity(net, x, t, cond, cfg)


def sample_consistency(student, schedule: SampleSchedule, count: int, generator: torch.Generator,
                       shape: Sequence[int], cond: Optional[torch.Tensor] = None,
                       cfg: Optional[CfgSpec] = None, dtype: torch.dtype = F64) -> torch.Tensor:
    """Denoise to 0, renoise to the next timestep, repeat; return the last denoise."""
    v = _velocity_fn(student, cond, cfg)
    x = torch.randn((count, *shape), dtype=dtype, generator=generator)
    ts = schedule.timesteps
    with torch.no_grad():
        for i, t in enumerate(ts):
            tb = torch.full((count,), t, dtype=F64)
            x0 = consistency_apply(v(x, tb), x, tb).to(dtype)
            if i + 1 == len(ts):
                return x0
            nxt = ts[i + 1]
            eps = torch.randn(x0.shape, dtype=dtype, generator=generator)
            x = math.cos(nxt) * x0 + math.sin(nxt) * eps
    raise AssertionError("unreachable")


def teacher_sample(teacher, count: int, generator: torch.Generator, shape: Sequence[int], steps: int = 50,
                   cond: Optional[torch.Tensor] = None, cfg: Optional[CfgSpec] = None,
                   t_max: float = HALF_PI, dtype: torch.dtype = F64) -> torch.Tensor:
    """Deterministic DDIM on the TrigFlow ODE over a uniform time grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    v = _velocity_fn(teacher, cond, cfg)
    x = torch.randn((count, *shape), dtype=dtype, generator=generator)
    grid = torch.linspace(t_max, 0.0, steps + 1, dtype=F64)
    with torch.no_grad():
        for t, s in zip(grid[:-1].tolist(), grid[1:].tolist()):
            F = v(x, torch.full((count,), t, dtype=F64))
            x = math.cos(t - s) * x - math.sin(t - s) * F.to(dtype)
    return x


def solve_ode_heun(velocity: Callable, x: torch.Tensor, t_start, steps: int = 100) -> torch.Tensor:
    """Integrate dx/dt = velocity(x, t) from per-sample ``t_start`` down to 0 (Heun)."""
    B = x.shape[0]
    t = torch.as_tensor(t_start, dtype=F64).expand(B).clone()
    h = -t / steps
    hc = h.reshape((B,) + (1,) * (x.ndim - 1)).to(x.dtype)
    with torch.no_grad():
        for k in range(steps):
            tk = t + k * h
            v0 = velocity(x, tk)
            x_pred = x + hc * v0
            v1 = velocity(x_pred, tk + h)
            x = x + 0.5 * hc * (v0 + v1)
    return x


# ---------------------------------------------------------------------------
# metrics


def _flat(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=F64)
    return x.reshape(x.shape[0], math.prod(x.shape[1:])) if x.ndim > 1 else x.reshape(-1, 1)


def random_directions(dim: int, count: int, generator: torch.Generator) -> torch.Tensor:
    d = torch.randn(count, dim, dtype=F64, generator=generator)
    return d / torch.linalg.vector_norm(d, dim=1, keepdim=True)


def _w2_1d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact 1-D W2 between empirical sets, column-wise (columns are projections)."""
    a, b = np.sort(a, axis=0), np.sort(b, axis=0)
    n, m = a.shape[0], b.shape[0]
    if n == m:
        return np.sqrt(np.mean((a - b) ** 2, axis=0))
    breaks = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    lo = np.concatenate([[0.0], breaks[:-1]])
    mid, width = 0.5 * (lo + breaks), breaks - lo
    ia = np.minimum((mid * n).astype(np.int64), n - 1)
    ib = np.minimum((mid * m).astype(np.int64), m - 1)
    return np.sqrt(np.sum(width[:, None] * (a[ia] - b[ib]) ** 2, axis=0))


def sliced_w2(a, b, projections: int = 128, generator: Optional[torch.Generator] = None,
              directions: Optional[torch.Tensor] = None) -> float:
    """Mean over unit projections of the 1-D Wasserstein-2 distance.

    Pass ``directions`` to share projections across calls (required for the
    triangle inequality to hold exactly).
    """
    A, B = _flat(a), _flat(b)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("sliced_w2 needs non-empty sample sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if directions is None:
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        directions = random_directions(A.shape[1], projections, gen)
    dirs = torch.as_tensor(directions, dtype=F64)
    return float(np.mean(_w2_1d((A @ dirs.T).numpy(), (B @ dirs.T).numpy())))


@dataclass(frozen=True)
class ModeReport:
    recovered: int
    shares: tuple
    sliced_w2: float = float("nan")

    @property
    def total(self) -> int:
        return len(self.shares)


def capture_radius(centers: torch.Tensor) -> float:
    c = torch.as_tensor(centers, dtype=F64)
    if c.shape[0] < 2:
        return math.inf
    d = torch.cdist(c, c)
    d.fill_diagonal_(math.inf)
    return 0.5 * float(d.min())


def mode_coverage(samples, centers, share_threshold: float = 0.02, radius: Optional[float] = None,
                  reference=None, generator: Optional[torch.Generator] = None) -> ModeReport:
    """Nearest-center assignment within ``radius``; samples outside every radius count as outliers."""
    x = _flat(samples)
    c = torch.as_tensor(centers, dtype=F64)
    if x.shape[0] == 0:
        raise ValueError("mode_coverage needs at least one sample")
    r = capture_radius(c) if radius is None else radius
    d = torch.cdist(x, c)
    dmin, idx = d.min(dim=1)
    idx = idx[dmin <= r]
    counts = torch.bincount(idx, minlength=c.shape[0]).to(F64)
    shares = tuple((counts / x.shape[0]).tolist())
    recovered = sum(s >= share_threshold for s in shares)
    w2 = float("nan") if reference is None else sliced_w2(x, reference, generator=generator)
    return ModeReport(recovered, shares, w2)


# ---------------------------------------------------------------------------
# precision study

PRECISION_COLUMNS = ("t", "output_rel_err", "jvp_rel_err")


def _rel_sq(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.to(F64), b.to(F64)
    den = float(b.pow(2).sum())
    return float((a - b).pow(2).sum()) / den if den > 0 else float((a - b).pow(2).sum())


def default_t_grid(points: int = 100) -> torch.Tensor:
    """Midpoints of ``points`` equal cells of (0, pi/2)."""
    return (torch.arange(points, dtype=F64) + 0.5) * HALF_PI / points


@dataclass(frozen=True)
class PrecisionStudy:
    rows: list

    def median(self, column: str) -> float:
        return float(np.median([r[column] for r in self.rows]))

    @property
    def ratio(self) -> float:
        out = self.median("output_rel_err")
        return self.median("jvp_rel_err") / out if out > 0 else math.inf


def precision_study(net, x0: torch.Tensor, generator: torch.Generator, t_grid: Optional[torch.Tensor] = None,
                    low: str = "single", high: str = "double", cond: Optional[torch.Tensor] = None,
                    out_path: Union[str, Path, None] = None) -> PrecisionStudy:
    """Relative squared L2 error of F and of ``cos t sin t dF/dt`` between two precisions.

    ``x0`` supplies the clean samples; noise is drawn from ``generator``. The
    tangent direction (the high-precision velocity) and every time coefficient
    stay in float64, so only the network evaluation changes precision.
    """
    t_grid = default_t_grid() if t_grid is None else torch.as_tensor(t_grid, dtype=F64)
    net_hi, net_lo = net.with_precision(high), net.with_precision(low)
    x0 = x0.to(F64)
    B = x0.shape[0]
    rows = []
    for t in t_grid.tolist():
        eps = torch.randn(x0.shape, dtype=F64, generator=generator)
        x_t = math.cos(t) * x0 + math.sin(t) * eps
        tb = torch.full((B,), t, dtype=F64)
        cs = math.cos(t) * math.sin(t)
        with torch.no_grad():
            direction = net_hi(x_t, tb, cond).to(F64)
        tt = torch.full((B,), cs, dtype=F64)
        F_hi, J_hi = net_hi.forward_jvp(x_t, tb, cond, cs * direction, tt)
        F_lo, J_lo = net_lo.forward_jvp(x_t, tb, cond, cs * direction, tt)
        rows.append({"t": t, "output_rel_err": _rel_sq(F_lo, F_hi), "jvp_rel_err": _rel_sq(J_lo, J_hi)})
    if out_path is not None:
        write_csv(out_path, PRECISION_COLUMNS, rows)
    return PrecisionStudy(rows)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def scatter_svg(points, path: Union[str, Path], extent: float = 2.0, size: int = 400,
                centers=None) -> Path:
    """Plain SVG scatter of 2-D points on the fixed square [-extent, extent]^2."""
    pts = _flat(points)
    if pts.shape[1] != 2:
        raise ValueError("scatter_svg takes 2-D points")

    def px(v):
        return (v + extent) / (2 * extent) * size

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    for x, y in pts.tolist():
        if abs(x) <= extent and abs(y) <= extent:
            parts.append(f'<circle cx="{px(x):.2f}" cy="{size - px(y):.2f}" r="1.2" fill="#1f4e99" fill-opacity="0.5"/>')
    if centers is not None:
        for x, y in torch.as_tensor(centers, dtype=F64).tolist():
            parts.append(f'<circle cx="{px(x):.2f}" cy="{size - px(y):.2f}" r="4" fill="none" stroke="#c0392b"/>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
    return path
