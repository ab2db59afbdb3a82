"""Command-line entry point: ``rcm <subcommand> ...``.

Every invocation ends with one JSON line: the result on stdout, or an error
object on stderr. Exit codes: 0 success, 1 check failed, 2 configuration or
file error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .attnjvp import BlockSpec, kernel_bench
from .config import ConfigError, load_config
from .evaluation import SampleSchedule, precision_study, sample_consistency, scatter_svg, write_csv
from .model import CfgSpec, load_checkpoint
from .pipeline import run_distillation
from .tasks import TaskSpec
from .trainer import NumericalAbort
from .verify import KERNEL_TOL, cp_property_grid, kernel_property_grid

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _emit(obj: dict, stream=None) -> None:
    print(json.dumps(obj, sort_keys=True), file=stream or sys.stdout, flush=True)


def _error(kind: str, message: str, **extra) -> None:
    _emit({"error": kind, "message": message, **extra}, sys.stderr)


def _task_of(extra: dict) -> Optional[TaskSpec]:
    return TaskSpec(**extra["task"]) if "task" in extra else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg, run = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    teacher_ckpt = args.teacher_checkpoint or run["teacher_checkpoint"]
    if teacher_ckpt is not None and not Path(teacher_ckpt).with_suffix(".json").exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher_ckpt}")
    out = run["output_dir"] or "runs/default"
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    _, report = run_distillation(cfg, out, teacher_ckpt, log=log)
    _emit({"command": "train", "output_dir": out, **report.to_dict()})
    return EXIT_OK


def cmd_sample(args) -> int:
    net, extra = load_checkpoint(args.checkpoint)
    schedule = SampleSchedule.from_sigma_max(args.sigma_max, args.steps)
    gen = torch.Generator().manual_seed(args.seed)
    task = _task_of(extra)
    cond = None
    if task is not None and task.conditional:
        cond = task.sample(args.count, gen)[1]
    samples = sample_consistency(net, schedule, args.count, gen, net.config.input_shape, cond=cond,
                                 cfg=CfgSpec(args.cfg_scale) if cond is not None else None)
    flat = samples.reshape(args.count, -1)
    cols = [f"x{j}" for j in range(flat.shape[1])]
    write_csv(args.out, cols, [dict(zip(cols, r)) for r in flat.tolist()])
    if args.svg:
        scatter_svg(flat, args.svg, centers=task.centers() if task is not None else None)
    _emit({"command": "sample", "timesteps": list(schedule.timesteps), "count": args.count, "out": args.out})
    return EXIT_OK


def cmd_verify_kernel(args) -> int:
    grid = kernel_property_grid(args.cases, args.seed)
    for (prec, d), err in sorted(grid.worst.items()):
        _emit({"precision": prec, "d": d, "max_rel_err": err, "tol": KERNEL_TOL[prec], "ok": err <= KERNEL_TOL[prec]})
    _emit({"command": "verify-kernel", "cases": grid.cases, "passed": grid.passed})
    return EXIT_OK if grid.passed else EXIT_CHECK_FAILED


def cmd_cp_check(args) -> int:
    res = cp_property_grid(args.seed)
    for (P, H, L, prec), ok in res.items():
        _emit({"P": P, "H": H, "L": L, "precision": prec, "bitwise_equal": ok})
    passed = all(res.values())
    _emit({"command": "cp-check", "cases": len(res), "passed": passed})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_precision_study(args) -> int:
    net, extra = load_checkpoint(args.checkpoint)
    gen = torch.Generator().manual_seed(args.seed)
    task = _task_of(extra)
    if task is not None:
        x0, cond = task.sample(args.samples, gen)
        x0 = x0.reshape((args.samples,) + net.config.input_shape)
    else:
        x0, cond = torch.randn((args.samples,) + net.config.input_shape, dtype=torch.float64, generator=gen), None
    study = precision_study(net, x0, gen, cond=cond, low=args.low, high=args.high, out_path=args.out)
    _emit({"command": "precision-study", "out": args.out, "median_output_rel_err": study.median("output_rel_err"),
           "median_jvp_rel_err": study.median("jvp_rel_err"), "ratio": study.ratio})
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = [tuple(int(v) for v in s.split("x")) for s in args.sizes]
    rows = kernel_bench(sizes, BlockSpec(args.block_rows, args.block_cols), args.repeats, args.out,
                        precision=args.precision, seed=args.seed)
    _emit({"command": "bench", "rows": len(rows), "out": args.out})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcm", description="Desk-scale rCM distillation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain (or load) a teacher and run rCM distillation")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir")
    t.add_argument("--teacher-checkpoint")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="multistep consistency sampling from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int, default=4)
    s.add_argument("--sigma-max", type=float, default=80.0)
    s.add_argument("--count", type=int, default=5000)
    s.add_argument("--cfg-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.csv")
    s.add_argument("--svg")
    s.set_defaults(fn=cmd_sample)

    v = sub.add_parser("verify-kernel", help="blocked attention JVP vs dense oracle on a random grid")
    v.add_argument("--cases", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify_kernel)

    c = sub.add_parser("cp-check", help="sharded vs unsharded attention JVP, bitwise")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_cp_check)

    ps = sub.add_parser("precision-study", help="single vs double error of network output and JVP")
    ps.add_argument("--checkpoint", required=True)
    ps.add_argument("--samples", type=int, default=256)
    ps.add_argument("--low", default="single", choices=["single", "double"])
    ps.add_argument("--high", default="double", choices=["single", "double"])
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", default="precision_study.csv")
    ps.set_defaults(fn=cmd_precision_study)

    b = sub.add_parser("bench", help="time dense vs blocked attention JVP")
    b.add_argument("--sizes", nargs="+", default=["64x64x16", "256x256x16", "512x512x32"],
                   help="N1xN2xd triples")
    b.add_argument("--block-rows", type=int, default=64)
    b.add_argument("--block-cols", type=int, default=64)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--precision", default="double", choices=["single", "double"])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _error("config", exc.detail, path=exc.path)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _error("file", str(exc))
        return EXIT_CONFIG
    except NumericalAbort as exc:
        _error("numerical", str(exc), iteration=exc.iteration, seed=exc.seed, checkpoint=exc.checkpoint)
        return EXIT_NUMERICAL
    except ValueError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
