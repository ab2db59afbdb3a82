"""rCM distillation loop, teacher pretraining, power EMA and the gap diagnostic."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from scipy import stats

from .distill import (WarmupState, dmd_loss, flow_matching_loss, per_sample_norm, scm_loss, scm_tangent,
                      tangent_packet)
from .evaluation import (SampleSchedule, default_t_grid, mode_coverage, sample_consistency, sliced_w2,
                         solve_ode_heun, teacher_sample, write_csv)
from .model import CfgSpec, NetConfig, VelocityNet, cfg_velocity, consistency_apply, save_checkpoint
from .schedule import TimeDistSpec, sample_time
from .tasks import TaskSpec

F64 = torch.float64
HALF_PI = math.pi / 2

METRIC_COLUMNS = ("iter", "step_kind", "scm_loss", "dmd_loss", "fm_loss", "g_norm_mean", "ema_snapshot_id")
SNAPSHOT_COLUMNS = ("snapshot_id", "iter", "modes_recovered", "sliced_w2")
OPTIMIZERS = ("sgd", "paper-adamw")

# sliced-W2 (50-step teacher vs held-out data) a pretrained teacher must beat
TEACHER_W2_THRESHOLD = {"gmm2d": 0.1, "checkerboard2d": 0.15, "toyseq": 0.3}


class NumericalAbort(RuntimeError):
    def __init__(self, what: str, iteration: int, seed: int, checkpoint: Optional[str]):
        super().__init__(f"{what} at iteration {iteration} (seed {seed}); last good checkpoint: {checkpoint}")
        self.iteration = iteration
        self.seed = seed
        self.checkpoint = checkpoint


def _check_finite(value: torch.Tensor, what: str, iteration: int, seed: int, checkpoint: Optional[str]) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericalAbort(f"non-finite {what}", iteration, seed, checkpoint)


# ---------------------------------------------------------------------------
# power EMA


def power_ema_exponent(ema_length: float) -> float:
    """Exponent ``gamma`` of the power profile whose relative std equals ``ema_length``.

    Largest real root of ``l^2 (g+2)^2 (g+3) = g+1``; ``inf`` for ``ema_length == 0``.
    """
    if ema_length == 0:
        return math.inf
    if not 0 < ema_length < math.sqrt(1 / 12):
        raise ValueError(f"ema_length must lie in [0, {math.sqrt(1 / 12):.4f}), got {ema_length}")
    l2 = ema_length * ema_length
    # l2 (g^3 + 7 g^2 + 16 g + 12) - g - 1
    roots = np.roots([l2, 7 * l2, 16 * l2 - 1, 12 * l2 - 1])
    real = roots[np.abs(roots.imag) < 1e-9].real
    return float(real.max())


def power_ema_beta(step: int, gamma: float) -> float:
    """Decay applied at update ``step`` (1-based)."""
    if step < 1:
        raise ValueError("EMA steps are 1-based")
    if math.isinf(gamma):
        return 0.0
    return (1.0 - 1.0 / step) ** (gamma + 1.0)


@dataclass
class EmaState:
    shadow: list
    ema_length: float
    gamma: float
    step: int = 0

    @classmethod
    def init(cls, params, ema_length: float) -> "EmaState":
        return cls([p.detach().clone() for p in params], ema_length, power_ema_exponent(ema_length))


def ema_update(state: EmaState, live_params, step: Optional[int] = None) -> EmaState:
    """One power-EMA update in place; ``step`` defaults to ``state.step + 1``."""
    live = [p.detach() for p in live_params]
    if len(live) != len(state.shadow) or any(a.shape != b.shape for a, b in zip(live, state.shadow)):
        raise ValueError("EMA shadow shapes do not mirror the live parameters")
    state.step = state.step + 1 if step is None else step
    beta = power_ema_beta(state.step, state.gamma)
    with torch.no_grad():
        for s, p in zip(state.shadow, live):
            s.mul_(beta).add_(p.to(s.dtype), alpha=1.0 - beta)
    return state


def ema_network(state: EmaState, template: VelocityNet) -> VelocityNet:
    net = copy.deepcopy(template)
    with torch.no_grad():
        for q, s in zip(net.parameters(), state.shadow):
            q.copy_(s)
    return net


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lambda_dmd: float = 0.01
    c: float = 0.1
    H: int = 0
    F_update: int = 5
    N_max: int = 4
    ema_length: float = 0.05
    p_G: TimeDistSpec = field(default_factory=lambda: TimeDistSpec("lognormal-arctan", -0.8, 1.6))
    p_D: TimeDistSpec = field(default_factory=lambda: TimeDistSpec("lognormal-arctan", 0.0, 1.6))
    lr_student: float = 1e-4
    lr_fake: float = 1e-4
    optimizer: str = "sgd"
    cfg_scale: float = 1.0
    sigma_max: float = 80.0
    total_iters: int = 2000
    seed: int = 0
    batch: int = 256
    task: TaskSpec = field(default_factory=TaskSpec)
    net: NetConfig = field(default_factory=NetConfig)
    data_source: str = "real"  # "real" | "teacher"
    time_derivative: str = "exact"  # "exact" | "semi"
    teacher_iters: int = 4000
    teacher_lr: float = 2e-3
    teacher_batch: int = 512
    teacher_time: TimeDistSpec = field(default_factory=lambda: TimeDistSpec("lognormal-arctan", 0.0, 1.6))
    snapshot_every: int = 500
    eval_samples: int = 5000
    eval_steps: int = 2

    def __post_init__(self):
        for name, cls in (("p_G", TimeDistSpec), ("p_D", TimeDistSpec), ("teacher_time", TimeDistSpec),
                          ("task", TaskSpec)):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, cls(**v))
        if isinstance(self.net, dict):
            # shape fields come from the task, so fill them before NetConfig validates
            self.net = NetConfig(**{**self.net, "num_classes": self.task.num_classes,
                                    **self._net_shape(self.net.get("variant", "mlp"))})
        if self.lambda_dmd < 0:
            raise ValueError("lambda_dmd must be >= 0")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.N_max < 1 or self.F_update < 1 or self.H < 0:
            raise ValueError("need N_max >= 1, F_update >= 1 and H >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.data_source not in ("real", "teacher"):
            raise ValueError("data_source must be 'real' or 'teacher'")
        if self.time_derivative not in ("exact", "semi"):
            raise ValueError("time_derivative must be 'exact' or 'semi'")
        if self.total_iters < 0 or self.batch < 1 or self.sigma_max <= 0:
            raise ValueError("need total_iters >= 0, batch >= 1 and sigma_max > 0")
        self.net = NetConfig(**{**asdict(self.net), "num_classes": self.task.num_classes,
                                **self._net_shape(self.net.variant)})

    def _net_shape(self, variant: str) -> dict:
        shape = self.task.data_shape
        if variant == "mlp":
            return {"data_dim": int(np.prod(shape))}
        return {"data_dim": shape[-1], "seq_len": shape[0]}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def generator_step(i: int, H: int, F_update: int) -> bool:
    return i <= H or i % F_update == 0


def _optimizer(params, kind: str, lr: float) -> torch.optim.Optimizer:
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.0)
    return torch.optim.AdamW(params, lr=lr, betas=(0.0, 0.999), weight_decay=0.01)


def _task_input(task: TaskSpec, net_cfg: NetConfig, x: torch.Tensor) -> torch.Tensor:
    return x.reshape((x.shape[0],) + net_cfg.input_shape)


# ---------------------------------------------------------------------------
# teacher pretraining


@dataclass
class TeacherReport:
    sliced_w2: float
    threshold: float
    modes_recovered: Optional[int]

    @property
    def passed(self) -> bool:
        return self.sliced_w2 <= self.threshold


def pretrain_teacher(task: TaskSpec, iters: int, seed: int, net_config: Optional[NetConfig] = None,
                     lr: float = 2e-3, batch: int = 512, time_dist: Optional[TimeDistSpec] = None,
                     cfg_dropout: float = 0.1) -> VelocityNet:
    """Flow-matching pretraining of a TrigFlow velocity network with Adam."""
    cfg = TrainConfig(task=task, net=net_config or NetConfig(), seed=seed)
    net_cfg = cfg.net
    time_dist = time_dist or cfg.teacher_time
    gen = torch.Generator().manual_seed(seed)
    net = VelocityNet(net_cfg, generator=gen)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(iters, 1))
    for i in range(1, iters + 1):
        x0, labels = task.sample(batch, gen)
        x0 = _task_input(task, net_cfg, x0).to(net.dtype)
        if labels is not None:
            drop = torch.rand(batch, generator=gen) < cfg_dropout
            labels = torch.where(drop, torch.full_like(labels, net.null_index), labels)
        t = sample_time(time_dist, batch, gen)
        eps = torch.randn(x0.shape, dtype=x0.dtype, generator=gen)
        c = torch.cos(t).to(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
        s = torch.sin(t).to(x0.dtype).reshape((-1,) + (1,) * (x0.ndim - 1))
        loss = flow_matching_loss(net(c * x0 + s * eps, t, labels), x0, eps, t)
        _check_finite(loss, "teacher flow-matching loss", i, seed, None)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    opt.zero_grad()
    return net


def evaluate_teacher(teacher: VelocityNet, task: TaskSpec, seed: int, count: int = 5000,
                     steps: int = 50) -> TeacherReport:
    gen = torch.Generator().manual_seed(seed)
    held_out, labels = task.sample(count, gen)
    samples = teacher_sample(teacher, count, gen, teacher.config.input_shape, steps=steps, cond=labels)
    samples = samples.reshape(held_out.shape)
    w2 = sliced_w2(samples, held_out, generator=torch.Generator().manual_seed(seed + 1))
    modes = mode_coverage(samples, task.centers()).recovered if task.name == "gmm2d" else None
    return TeacherReport(w2, TEACHER_W2_THRESHOLD[task.name], modes)


# ---------------------------------------------------------------------------
# rollout


def decreasing_from_draws(draws) -> torch.Tensor:
    """``[pi/2, min(d_1, pi/2), min(d_2, t_2), ...]`` along the first axis."""
    draws = torch.as_tensor(draws, dtype=F64)
    first = torch.full((1,) + draws.shape[1:], HALF_PI, dtype=F64)
    return torch.cummin(torch.cat([first, draws]), dim=0).values


def sample_decreasing_timesteps(p_D: TimeDistSpec, N: int, generator: torch.Generator,
                                batch: Optional[int] = None) -> torch.Tensor:
    """Shape ``[N]`` (or ``[N, batch]``) starting at pi/2, each entry the min of a fresh draw and its predecessor."""
    if N < 1:
        raise ValueError("N must be >= 1")
    per = 1 if batch is None else batch
    draws = sample_time(p_D, (N - 1) * per, generator).reshape(N - 1, per)
    out = decreasing_from_draws(draws)
    return out[:, 0] if batch is None else out


@dataclass
class RolloutTrace:
    timesteps: torch.Tensor  # [N, B]
    states: list  # x at t_1, ..., t_N
    grad_step: int  # index (1-based) of the denoise carrying gradient; 0 if none
    x0: torch.Tensor


def rollout(student, N: int, p_D: TimeDistSpec, generator: torch.Generator, grad_on_last: bool,
            batch: int, shape, cond: Optional[torch.Tensor] = None, N_max: Optional[int] = None) -> RolloutTrace:
    """Multistep generation from pure noise with stochastic decreasing timesteps."""
    if N_max is not None and N > N_max:
        raise ValueError(f"N={N} exceeds N_max={N_max}")
    ts = sample_decreasing_timesteps(p_D, N, generator, batch=batch)
    dtype = getattr(student, "dtype", F64)
    x = torch.randn((batch, *shape), dtype=dtype, generator=generator)
    states = []
    x0 = x
    for n in range(N):
        states.append(x)
        t = ts[n]
        if n == N - 1 and grad_on_last:
            x0 = consistency_apply(student(x, t, cond), x, t)
        else:
            with torch.no_grad():
                x0 = consistency_apply(student(x, t, cond), x, t)
        if n < N - 1:
            nxt = ts[n + 1].reshape((-1,) + (1,) * (x.ndim - 1))
            eps = torch.randn(x0.shape, dtype=dtype, generator=generator)
            x = torch.cos(nxt).to(dtype) * x0 + torch.sin(nxt).to(dtype) * eps
    return RolloutTrace(ts, states, N if grad_on_last else 0, x0)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    student: VelocityNet
    ema: EmaState
    fake: VelocityNet
    teacher: VelocityNet
    metrics: list
    snapshots: list
    generator_steps: int = 0
    critic_steps: int = 0

    def ema_student(self) -> VelocityNet:
        return ema_network(self.ema, self.student)


def _col(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape((-1,) + (1,) * (like.ndim - 1)).to(like.dtype)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train_rcm(config: TrainConfig, teacher: VelocityNet, output_dir: Union[str, Path, None] = None,
              log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Alternating generator / critic updates; student and fake score start from the teacher."""
    cfg = config
    gen = torch.Generator().manual_seed(cfg.seed)
    task, shape = cfg.task, teacher.config.input_shape
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    # the teacher is only ever evaluated under no_grad, so the caller's copy is left as is
    student, fake = copy.deepcopy(teacher), copy.deepcopy(teacher)
    for p in (*student.parameters(), *fake.parameters()):
        p.requires_grad_(True)
    opt_s = _optimizer(student.parameters(), cfg.optimizer, cfg.lr_student)
    opt_f = _optimizer(fake.parameters(), cfg.optimizer, cfg.lr_fake)
    ema = EmaState.init(student.parameters(), cfg.ema_length)
    cfg_spec = CfgSpec(cfg.cfg_scale)
    conditional = task.conditional

    def teacher_v(x, t, cond):
        with torch.no_grad():
            return cfg_velocity(teacher, x, t, cond, cfg_spec)

    pool = None
    if cfg.data_source == "teacher":
        n_pool = max(cfg.batch * 16, 4096)
        _, pool_labels = task.sample(n_pool, gen)
        pool = (teacher_sample(teacher, n_pool, gen, shape, cond=pool_labels, cfg=cfg_spec), pool_labels)

    def data_batch():
        if pool is None:
            x0, lab = task.sample(cfg.batch, gen)
            return _task_input(task, teacher.config, x0).to(student.dtype), lab
        idx = torch.randint(pool[0].shape[0], (cfg.batch,), generator=gen)
        return pool[0][idx].to(student.dtype), None if pool[1] is None else pool[1][idx]

    def labels_like():
        return task.sample(cfg.batch, gen)[1] if conditional else None

    metrics, snapshots = [], []
    last_ckpt: Optional[str] = None
    n_gen = n_crit = 0
    eval_held, eval_labels = task.sample(cfg.eval_samples, torch.Generator().manual_seed(cfg.seed + 10_007))

    for i in range(1, cfg.total_iters + 1):
        row = dict.fromkeys(METRIC_COLUMNS)
        row["iter"] = i
        if generator_step(i, cfg.H, cfg.F_update):
            n_gen += 1
            row["step_kind"] = "generator"
            x0, cond = data_batch()
            t = sample_time(cfg.p_G, cfg.batch, gen)
            eps = torch.randn(x0.shape, dtype=x0.dtype, generator=gen)
            x_t = _col(torch.cos(t), x0) * x0 + _col(torch.sin(t), x0) * eps
            packet = tangent_packet(student, teacher_v, x_t, t, cond, cfg.time_derivative)
            g = scm_tangent(packet, WarmupState.at(i, cfg.H))
            loss_scm = scm_loss(student(x_t, t, cond), packet.F_sg, g, cfg.c)
            _check_finite(loss_scm, "sCM loss", i, cfg.seed, last_ckpt)
            loss = loss_scm
            row["scm_loss"] = float(loss_scm.detach())
            row["g_norm_mean"] = float(per_sample_norm(g).mean())
            if i > cfg.H:
                N = int(torch.randint(1, cfg.N_max + 1, (1,), generator=gen))
                rc = labels_like()
                x0_gen = rollout(student, N, cfg.p_D, gen, True, cfg.batch, shape, rc).x0
                t_d = sample_time(cfg.p_D, cfg.batch, gen)
                eps_d = torch.randn(x0_gen.shape, dtype=x0_gen.dtype, generator=gen)
                x_td = _col(torch.cos(t_d), x0_gen) * x0_gen.detach() + _col(torch.sin(t_d), x0_gen) * eps_d
                with torch.no_grad():
                    f_fake = consistency_apply(fake(x_td, t_d, rc), x_td, t_d)
                    f_teacher = consistency_apply(teacher_v(x_td, t_d, rc), x_td, t_d)
                loss_dmd = dmd_loss(x0_gen, f_fake, f_teacher).loss
                _check_finite(loss_dmd, "DMD loss", i, cfg.seed, last_ckpt)
                row["dmd_loss"] = float(loss_dmd.detach())
                loss = loss + cfg.lambda_dmd * loss_dmd
            opt_s.zero_grad()
            loss.backward()
            opt_s.step()
            ema_update(ema, student.parameters())
        else:
            n_crit += 1
            row["step_kind"] = "critic"
            N = int(torch.randint(1, cfg.N_max + 1, (1,), generator=gen))
            rc = labels_like()
            with torch.no_grad():
                x0_gen = rollout(student, N, cfg.p_D, gen, False, cfg.batch, shape, rc).x0
            t = sample_time(cfg.p_D, cfg.batch, gen)
            eps = torch.randn(x0_gen.shape, dtype=x0_gen.dtype, generator=gen)
            x_t = _col(torch.cos(t), x0_gen) * x0_gen + _col(torch.sin(t), x0_gen) * eps
            loss_fm = flow_matching_loss(fake(x_t, t, rc), x0_gen, eps, t)
            _check_finite(loss_fm, "fake-score flow-matching loss", i, cfg.seed, last_ckpt)
            row["fm_loss"] = float(loss_fm.detach())
            opt_f.zero_grad()
            loss_fm.backward()
            opt_f.step()

        if cfg.snapshot_every > 0 and (i % cfg.snapshot_every == 0 or i == cfg.total_iters):
            sid = len(snapshots)
            row["ema_snapshot_id"] = sid
            net = ema_network(ema, student)
            snap_gen = torch.Generator().manual_seed(cfg.seed + 20_011)
            samples = sample_consistency(net, SampleSchedule.from_sigma_max(cfg.sigma_max, cfg.eval_steps),
                                         cfg.eval_samples, snap_gen, shape, cond=eval_labels,
                                         cfg=cfg_spec if conditional else None).reshape(eval_held.shape)
            centers = task.centers()
            snapshots.append({
                "snapshot_id": sid, "iter": i,
                "modes_recovered": mode_coverage(samples, centers).recovered if centers is not None else "",
                "sliced_w2": sliced_w2(samples, eval_held, generator=torch.Generator().manual_seed(cfg.seed)),
            })
            if out is not None:
                last_ckpt = str(save_checkpoint(net, out / f"ema_{sid:04d}", {"iter": i, "seed": cfg.seed}))
            if log is not None:
                log(f"iter {i}: snapshot {sid} {snapshots[-1]}")
        metrics.append(row)

    if out is not None:
        write_metrics(out / "metrics.csv", metrics)
        write_csv(out / "snapshots.csv", SNAPSHOT_COLUMNS, snapshots)
    return TrainResult(student, ema, fake, teacher, metrics, snapshots, n_gen, n_crit)


def write_metrics(path: Union[str, Path], rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r["iter"]), r["step_kind"], _fmt(r["scm_loss"]), _fmt(r["dmd_loss"]),
                               _fmt(r["fm_loss"]), _fmt(r["g_norm_mean"]),
                               "" if r["ema_snapshot_id"] is None else str(r["ema_snapshot_id"])]))
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# error-accumulation diagnostic


@dataclass(frozen=True)
class GapDiagnostic:
    t_grid: tuple
    gaps: tuple
    spearman_rho: float

    @property
    def largest_t_gap(self) -> float:
        return self.gaps[-1]


def denoiser_gap(student, teacher, x0: torch.Tensor, generator: torch.Generator,
                 t_grid: Optional[torch.Tensor] = None, heun_steps: int = 100,
                 cond: Optional[torch.Tensor] = None) -> GapDiagnostic:
    """Mean ``||f_student(x_t, t) - ODE_teacher(x_t, t -> 0)||`` per grid time, and its rank correlation with t."""
    t_grid = default_t_grid(20) if t_grid is None else torch.as_tensor(t_grid, dtype=F64)
    x0 = x0.to(F64)
    gaps = []
    for t in t_grid.tolist():
        eps = torch.randn(x0.shape, dtype=F64, generator=generator)
        x_t = math.cos(t) * x0 + math.sin(t) * eps
        tb = torch.full((x0.shape[0],), t, dtype=F64)
        with torch.no_grad():
            f_s = consistency_apply(student(x_t, tb, cond), x_t, tb).to(F64)
            ref = solve_ode_heun(lambda x, tt: teacher(x, tt, cond).to(F64), x_t, tb, heun_steps)
        gaps.append(float(per_sample_norm(f_s - ref).mean()))
    rho = float(stats.spearmanr(t_grid.numpy(), np.asarray(gaps)).statistic)
    return GapDiagnostic(tuple(t_grid.tolist()), tuple(gaps), rho)
