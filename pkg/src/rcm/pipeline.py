"""Teacher pretraining + rCM distillation + evaluation as one reproducible run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import torch

from .evaluation import SampleSchedule, mode_coverage, random_directions, sample_consistency, scatter_svg, \
    sliced_w2, teacher_sample, write_csv
from .model import CfgSpec, VelocityNet, load_checkpoint, save_checkpoint
from .trainer import TEACHER_W2_THRESHOLD, TrainConfig, TrainResult, pretrain_teacher, train_rcm

EVAL_SEED_OFFSET = 7_919


@dataclass(frozen=True)
class RunReport:
    teacher_w2: float
    teacher_w2_threshold: float
    teacher_modes: Optional[int]
    student_w2: float
    student_modes: Optional[int]
    student_steps: int
    eval_samples: int

    @property
    def w2_ratio(self) -> float:
        return self.student_w2 / self.teacher_w2

    def to_dict(self) -> dict:
        return {**asdict(self), "w2_ratio": self.w2_ratio}


def obtain_teacher(cfg: TrainConfig, checkpoint: Union[str, Path, None] = None) -> VelocityNet:
    if checkpoint is not None:
        net, _ = load_checkpoint(checkpoint)
        return net
    return pretrain_teacher(cfg.task, cfg.teacher_iters, cfg.seed, cfg.net, lr=cfg.teacher_lr,
                            batch=cfg.teacher_batch, time_dist=cfg.teacher_time)


def evaluate_run(cfg: TrainConfig, teacher: VelocityNet, student: VelocityNet, steps: Optional[int] = None,
                 count: Optional[int] = None) -> tuple[RunReport, torch.Tensor]:
    """Teacher (50-step ODE) and student (k-step consistency) against one held-out set and one projection set."""
    task, shape = cfg.task, teacher.config.input_shape
    steps = cfg.eval_steps if steps is None else steps
    count = cfg.eval_samples if count is None else count
    gen = torch.Generator().manual_seed(cfg.seed + EVAL_SEED_OFFSET)
    held, labels = task.sample(count, gen)
    flat_dim = held.reshape(count, -1).shape[1]
    dirs = random_directions(flat_dim, 128, gen)
    cfg_spec = CfgSpec(cfg.cfg_scale) if task.conditional else None
    t_samples = teacher_sample(teacher, count, gen, shape, cond=labels, cfg=cfg_spec).reshape(held.shape)
    s_samples = sample_consistency(student, SampleSchedule.from_sigma_max(cfg.sigma_max, steps), count, gen, shape,
                                   cond=labels, cfg=cfg_spec).reshape(held.shape)
    centers = task.centers()
    report = RunReport(
        teacher_w2=sliced_w2(t_samples, held, directions=dirs),
        teacher_w2_threshold=TEACHER_W2_THRESHOLD[task.name],
        teacher_modes=mode_coverage(t_samples, centers).recovered if centers is not None else None,
        student_w2=sliced_w2(s_samples, held, directions=dirs),
        student_modes=mode_coverage(s_samples, centers).recovered if centers is not None else None,
        student_steps=steps,
        eval_samples=count,
    )
    return report, s_samples


def run_distillation(cfg: TrainConfig, output_dir: Union[str, Path, None] = None,
                     teacher_checkpoint: Union[str, Path, None] = None,
                     log: Optional[Callable[[str], None]] = None) -> tuple[TrainResult, RunReport]:
    teacher = obtain_teacher(cfg, teacher_checkpoint)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, out / "teacher", {"task": cfg.task.to_dict(), "seed": cfg.seed})
    result = train_rcm(cfg, teacher, out, log=log)
    student = result.ema_student()
    report, samples = evaluate_run(cfg, teacher, student)
    if out is not None:
        save_checkpoint(student, out / "student_ema", {"task": cfg.task.to_dict(), "seed": cfg.seed})
        (out / "run.json").write_text(json.dumps({"config": cfg.to_dict(), "report": report.to_dict()},
                                                 indent=2, sort_keys=True))
        flat = samples.reshape(samples.shape[0], -1)
        write_csv(out / "samples.csv", [f"x{j}" for j in range(flat.shape[1])],
                  [{f"x{j}": v for j, v in enumerate(r)} for r in flat.tolist()])
        if flat.shape[1] == 2:
            scatter_svg(flat, out / "samples.svg", centers=cfg.task.centers())
    return result, report
