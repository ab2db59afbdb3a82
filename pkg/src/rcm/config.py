"""JSON run configuration: schema, validation and environment overrides."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from .trainer import TrainConfig

ENV_SEED = "RCM_SEED"
ENV_OUTPUT_DIR = "RCM_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending entry (JSON-pointer style)."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path
        self.detail = message


def _num(minimum=None, exclusive=None) -> dict:
    d: dict = {"type": "number"}
    if minimum is not None:
        d["minimum"] = minimum
    if exclusive is not None:
        d["exclusiveMinimum"] = exclusive
    return d


def _int(minimum=None) -> dict:
    d: dict = {"type": "integer"}
    if minimum is not None:
        d["minimum"] = minimum
    return d


_TIME_DIST = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["lognormal-arctan", "uniform-shifted-rf"]},
        "mean": _num(),
        "std": _num(exclusive=0),
        "scale": _num(exclusive=0),
        "shift": _num(exclusive=0),
    },
}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "rcm run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda_dmd": _num(minimum=0),
        "c": _num(exclusive=0),
        "H": _int(0),
        "F_update": _int(1),
        "N_max": _int(1),
        "ema_length": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.2886},
        "p_G": _TIME_DIST,
        "p_D": _TIME_DIST,
        "lr_student": _num(exclusive=0),
        "lr_fake": _num(exclusive=0),
        "optimizer": {"enum": ["sgd", "paper-adamw"]},
        "cfg_scale": _num(minimum=0),
        "sigma_max": _num(exclusive=0),
        "total_iters": _int(0),
        "seed": _int(0),
        "batch": _int(1),
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["gmm2d", "checkerboard2d", "toyseq"]},
                "modes": _int(1),
                "radius": _num(exclusive=0),
                "mode_std": _num(exclusive=0),
                "conditional": {"type": "boolean"},
                "seq_len": _int(1),
            },
        },
        "net": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["mlp", "tiny-transformer"]},
                "width": _int(1),
                "depth": _int(1),
                "heads": _int(1),
                "time_freqs": _int(1),
                "max_freq": _num(exclusive=0),
                "time_precision": {"enum": ["same", "double"]},
                "activation": {"enum": ["silu", "gelu-tanh", "identity"]},
                "precision": {"enum": ["single", "double"]},
                "attn_block_rows": _int(0),
                "attn_block_cols": _int(0),
                "norm_eps": _num(exclusive=0),
            },
        },
        "data_source": {"enum": ["real", "teacher"]},
        "time_derivative": {"enum": ["exact", "semi"]},
        "teacher_iters": _int(0),
        "teacher_lr": _num(exclusive=0),
        "teacher_batch": _int(1),
        "teacher_time": _TIME_DIST,
        "snapshot_every": _int(0),
        "eval_samples": _int(1),
        "eval_steps": {"type": "integer", "minimum": 1, "maximum": 8},
        "teacher_checkpoint": {"type": ["string", "null"]},
        "output_dir": {"type": ["string", "null"]},
    },
}

RUN_KEYS = ("teacher_checkpoint", "output_dir")


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else ""


def validate(raw: Any) -> None:
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _pointer(e.absolute_path))


def load_config(source: Union[str, Path, dict], seed: Optional[int] = None,
                output_dir: Optional[str] = None, env: Optional[dict] = None) -> tuple[TrainConfig, dict]:
    """Parse, validate and build a :class:`TrainConfig` plus run options.

    Precedence: explicit arguments, then ``RCM_SEED`` / ``RCM_OUTPUT_DIR``, then the file.
    """
    env = os.environ if env is None else env
    if isinstance(source, dict):
        raw = dict(source)
    else:
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    if ENV_SEED in env:
        try:
            raw["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED}={env[ENV_SEED]!r} is not an integer", "/seed") from exc
    if ENV_OUTPUT_DIR in env:
        raw["output_dir"] = env[ENV_OUTPUT_DIR]
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    validate(raw)
    run = {k: raw.pop(k, None) for k in RUN_KEYS}
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, run
