"""Toy velocity networks with tangent-threaded forward passes.

Every layer is written once against values that are either plain tensors
(``forward``) or :class:`DualTensor` (``forward_jvp``). The primal arithmetic is
shared, so ``forward_jvp`` with zero tangents reproduces ``forward`` bitwise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .attnjvp import AttentionInputs, BlockSpec, attention_jvp_blocked, attention_primal
from .dualcore import (
    DualTensor, activation, dtype_of, dual_cat, dual_cos, dual_linear, dual_pointwise, dual_rmsnorm, dual_sin,
    linear, precision_of, rmsnorm,
)

Value = Union[torch.Tensor, DualTensor]
F64 = torch.float64


@dataclass
class NetConfig:
    variant: str = "mlp"  # "mlp" | "tiny-transformer"
    data_dim: int = 2  # per-token channels for the transformer
    seq_len: int = 0  # transformer only
    width: int = 128
    depth: int = 3  # hidden layers (mlp) or blocks (transformer)
    heads: int = 2
    num_classes: int = 0  # 0: unconditional; the null token is index num_classes
    time_freqs: int = 16
    max_freq: float = 16.0
    time_precision: str = "same"  # "same" | "double"
    activation: str = "silu"
    with_s: bool = False  # second time input for trajectory (sCTM) networks
    precision: str = "double"
    attn_block_rows: int = 0  # 0: one block spanning the sequence
    attn_block_cols: int = 0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.variant not in ("mlp", "tiny-transformer"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.variant == "tiny-transformer":
            if self.seq_len < 1:
                raise ValueError("tiny-transformer needs seq_len >= 1")
            if self.width % self.heads:
                raise ValueError("width must be divisible by heads")
        if self.time_precision not in ("same", "double"):
            raise ValueError("time_precision must be 'same' or 'double'")
        if self.activation not in ("silu", "gelu-tanh", "identity"):
            raise ValueError(f"no dual primitive for activation {self.activation!r}")
        dtype_of(self.precision)

    @property
    def input_shape(self) -> tuple:
        return (self.data_dim,) if self.variant == "mlp" else (self.seq_len, self.data_dim)


# ---------------------------------------------------------------------------
# value-polymorphic helpers


def _lin(x: Value, layer: nn.Linear) -> Value:
    if isinstance(x, DualTensor):
        return dual_linear(x, layer.weight, layer.bias)
    return linear(x, layer.weight, layer.bias)


def _act(x: Value, kind: str) -> Value:
    return dual_pointwise(x, kind) if isinstance(x, DualTensor) else activation(x, kind)


def _norm(x: Value, weight: torch.Tensor, eps: float) -> Value:
    return dual_rmsnorm(x, weight, eps) if isinstance(x, DualTensor) else rmsnorm(x, weight, eps)


def _cat(xs, dim=-1) -> Value:
    if any(isinstance(x, DualTensor) for x in xs):
        xs = [x if isinstance(x, DualTensor) else DualTensor.constant(x) for x in xs]
        return dual_cat(xs, dim)
    return torch.cat(xs, dim=dim)


class _F64Linear:
    """View of a linear layer whose parameters are upcast to float64 at use."""

    def __init__(self, inner: nn.Linear):
        self.weight = inner.weight.to(F64)
        self.bias = inner.bias.to(F64)


class VelocityNet(nn.Module):
    def __init__(self, config: NetConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        c = config
        W = c.width
        self.time_in = nn.Linear(2 * c.time_freqs, W)
        self.time_out = nn.Linear(W, W)
        if c.with_s:
            self.s_in = nn.Linear(2 * c.time_freqs, W)
        self.cond = nn.Embedding(c.num_classes + 1, W)
        freqs = torch.exp(torch.linspace(0.0, math.log(c.max_freq), c.time_freqs, dtype=F64))
        self.freqs = freqs  # kept in float64 for every net precision
        if c.variant == "mlp":
            dims = [c.data_dim + 2 * W] + [W] * c.depth
            self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
            self.head = nn.Linear(W, c.data_dim)
        else:
            self.embed = nn.Linear(c.data_dim, W)
            self.pos = nn.Parameter(torch.zeros(c.seq_len, W))
            self.blocks = nn.ModuleList(_Block(W, c.heads, c.norm_eps) for _ in range(c.depth))
            self.final_mod = nn.Linear(W, 2 * W)
            self.final_norm = nn.Parameter(torch.ones(W))
            self.head = nn.Linear(W, c.data_dim)
        self.reset_parameters(generator)
        self.to(dtype_of(c.precision))

    # -- parameters --------------------------------------------------------

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        gen = generator if generator is not None else torch.Generator().manual_seed(0)

        def randn(shape):
            return torch.randn(shape, generator=gen, dtype=F64)

        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.split(".")[-1]
                if "norm" in leaf:
                    p.fill_(1.0)
                elif leaf == "bias":
                    p.zero_()
                elif leaf == "pos":
                    p.copy_(0.02 * randn(p.shape))
                elif name.startswith("cond."):
                    p.copy_(randn(p.shape))
                else:
                    p.copy_(randn(p.shape) / math.sqrt(p.shape[1]))
            if self.config.variant == "tiny-transformer":
                for blk in self.blocks:
                    blk.mod.weight.mul_(0.1)

    def zero_head(self) -> "VelocityNet":
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    @property
    def null_index(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self) -> torch.dtype:
        return dtype_of(self.config.precision)

    def with_precision(self, precision: str) -> "VelocityNet":
        """Copy with identical (rounded) parameters at another precision."""
        cfg = NetConfig(**{**asdict(self.config), "precision": precision})
        other = VelocityNet(cfg)
        with torch.no_grad():
            for (n, p), (_, q) in zip(self.named_parameters(), other.named_parameters()):
                q.copy_(p.to(q.dtype))
        return other

    def with_time_precision(self, mode: str) -> "VelocityNet":
        cfg = NetConfig(**{**asdict(self.config), "time_precision": mode})
        other = VelocityNet(cfg)
        other.load_state_dict(self.state_dict())
        return other

    # -- embeddings ----------------------------------------------------------

    def _sinusoid(self, t: Value, dtype) -> Value:
        f = self.freqs.to(dtype)
        if isinstance(t, DualTensor):
            arg = DualTensor(t.primal[:, None] * f, t.tangent[:, None] * f)
            return _cat([dual_sin(arg), dual_cos(arg)])
        arg = t[:, None] * f
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    def _time_embedding(self, t: Value, s: Optional[torch.Tensor]) -> Value:
        net_dtype = self.dtype
        if self.config.time_precision == "double":
            dtype, lin_in, lin_out = F64, _F64Linear(self.time_in), _F64Linear(self.time_out)
            lin_s = _F64Linear(self.s_in) if self.config.with_s else None
        else:
            dtype, lin_in, lin_out = net_dtype, self.time_in, self.time_out
            lin_s = self.s_in if self.config.with_s else None
        t = t.to(dtype)
        h = _lin(self._sinusoid(t, dtype), lin_in)
        if lin_s is not None:
            if s is None:
                raise ValueError("this network takes a second time input s")
            h = h + _lin(self._sinusoid(s.to(dtype), dtype), lin_s)
        h = _lin(_act(h, "silu"), lin_out)
        return h.to(net_dtype)

    def _cond_embedding(self, cond: Optional[torch.Tensor], batch: int) -> torch.Tensor:
        if cond is None:
            cond = torch.full((batch,), self.null_index, dtype=torch.long)
        return self.cond(cond)

    # -- bodies --------------------------------------------------------------

    def _body(self, x: Value, temb: Value, cemb: torch.Tensor) -> Value:
        c = self.config
        if c.variant == "mlp":
            h = _cat([x, temb, cemb])
            for layer in self.hidden:
                h = _act(_lin(h, layer), c.activation)
            return _lin(h, self.head)
        cvec = temb + cemb
        h = _lin(x, self.embed) + self.pos
        for blk in self.blocks:
            h = blk(h, cvec, self._attention)
        mod = _lin(_act(cvec, "silu"), self.final_mod)
        shift, scale = mod[..., None, : c.width], mod[..., None, c.width:]
        return _lin(_norm(h, self.final_norm, c.norm_eps) * (scale + 1.0) + shift, self.head)

    def _attention(self, q: Value, k: Value, v: Value) -> Value:
        if not isinstance(q, DualTensor):
            return attention_primal(q, k, v)
        n = q.shape[-2]
        blocks = BlockSpec(self.config.attn_block_rows or n, self.config.attn_block_cols or n)
        out = attention_jvp_blocked(
            AttentionInputs(q.primal, k.primal, v.primal, q.tangent, k.tangent, v.tangent), blocks
        )
        return DualTensor(out.O, out.tO)

    def _check(self, x_t: torch.Tensor) -> None:
        if tuple(x_t.shape[1:]) != self.config.input_shape:
            raise ValueError(
                f"{self.config.variant} expects inputs of shape [B, {', '.join(map(str, self.config.input_shape))}], "
                f"got {tuple(x_t.shape)}"
            )

    @staticmethod
    def _times(t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=F64)
        return t.expand(batch) if t.ndim == 0 else t

    def forward(self, x_t: torch.Tensor, t, cond: Optional[torch.Tensor] = None,
                s: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check(x_t)
        x = x_t.to(self.dtype)
        t = self._times(t, x.shape[0])
        s = None if s is None else self._times(s, x.shape[0])
        return self._body(x, self._time_embedding(t, s), self._cond_embedding(cond, x.shape[0]))

    def forward_jvp(self, x_t: torch.Tensor, t, cond: Optional[torch.Tensor], tx: torch.Tensor, tt,
                    s: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Velocity and its directional derivative along ``(tx, tt)``.

        Runs without parameter-gradient tracking: both outputs are detached.
        ``s`` (trajectory networks) is held fixed.
        """
        self._check(x_t)
        if tx.shape != x_t.shape:
            raise ValueError(f"tx shape {tuple(tx.shape)} != x_t shape {tuple(x_t.shape)}")
        B = x_t.shape[0]
        t = self._times(t, B)
        tt = self._times(tt, B)
        s = None if s is None else self._times(s, B)
        with torch.no_grad():
            x = DualTensor(x_t.to(self.dtype), tx.to(self.dtype))
            temb = self._time_embedding(DualTensor(t, tt.to(F64)), s)
            out = self._body(x, temb, self._cond_embedding(cond, B))
        return out.primal, out.tangent


class _Block(nn.Module):
    def __init__(self, width: int, heads: int, eps: float):
        super().__init__()
        self.width, self.heads, self.eps = width, heads, eps
        self.mod = nn.Linear(width, 6 * width)
        self.norm1 = nn.Parameter(torch.ones(width))
        self.norm2 = nn.Parameter(torch.ones(width))
        self.q_norm = nn.Parameter(torch.ones(width // heads))
        self.k_norm = nn.Parameter(torch.ones(width // heads))
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, 2 * width)
        self.fc2 = nn.Linear(2 * width, width)

    def _heads(self, x: Value) -> Value:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.width // self.heads).transpose(1, 2)

    def forward(self, h: Value, cvec: Value, attention) -> Value:
        W = self.width
        mod = _lin(_act(cvec, "silu"), self.mod)
        sh1, sc1, g1, sh2, sc2, g2 = (mod[..., None, i * W:(i + 1) * W] for i in range(6))
        y = _norm(h, self.norm1, self.eps) * (sc1 + 1.0) + sh1
        qkv = _lin(y, self.qkv)
        q, k, v = (self._heads(qkv[..., i * W:(i + 1) * W]) for i in range(3))
        hd = W // self.heads
        q = _norm(q, self.q_norm, self.eps) * (1.0 / math.sqrt(hd))
        k = _norm(k, self.k_norm, self.eps)
        o = attention(q, k, v)
        b, _, n, _ = o.shape
        o = o.transpose(1, 2).reshape(b, n, W)
        h = h + _lin(o, self.proj) * g1
        y = _norm(h, self.norm2, self.eps) * (sc2 + 1.0) + sh2
        return h + _lin(_act(_lin(y, self.fc1), "gelu-tanh"), self.fc2) * g2


# ---------------------------------------------------------------------------
# heads


def _time_coeffs(t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.as_tensor(t, dtype=F64)
    if t.ndim == 1:
        t = t.reshape(t.shape + (1,) * (like.ndim - 1))
    return torch.cos(t).to(like.dtype), torch.sin(t).to(like.dtype)


def consistency_apply(F: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
    """``f = cos(t) x_t - sin(t) F``; coefficients evaluated in float64."""
    c, s = _time_coeffs(t, F)
    return c * x_t.to(F.dtype) - s * F


@dataclass(frozen=True)
class CfgSpec:
    scale: float = 1.0
    null_cond: Optional[int] = None  # defaults to the network's null token

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def cfg_velocity(net: VelocityNet, x_t: torch.Tensor, t, cond: Optional[torch.Tensor], spec: CfgSpec) -> torch.Tensor:
    """``F(null) + s (F(cond) - F(null))``, blended in velocity space."""
    null = spec.null_cond if spec.null_cond is not None else net.null_index
    null_cond = torch.full((x_t.shape[0],), null, dtype=torch.long)
    if spec.scale == 1.0 or cond is None:
        return net(x_t, t, cond)
    if spec.scale == 0.0:
        return net(x_t, t, null_cond)
    f_null = net(x_t, t, null_cond)
    return f_null + spec.scale * (net(x_t, t, cond) - f_null)


# ---------------------------------------------------------------------------
# checkpoints: <stem>.npz holds the arrays, <stem>.json the manifest


def save_checkpoint(net: VelocityNet, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
    path = Path(path)
    stem = path.with_suffix("")
    arrays = {n: p.detach().cpu().numpy() for n, p in net.state_dict().items()}
    manifest = {
        "format": "rcm-checkpoint/1",
        "config": asdict(net.config),
        "arrays": [{"name": n, "shape": list(a.shape), "precision": precision_of(torch.from_numpy(a))}
                   for n, a in arrays.items()],
        "extra": extra or {},
    }
    np.savez(stem.with_suffix(".npz"), **arrays)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return stem.with_suffix(".json")


def load_checkpoint(path: Union[str, Path]) -> tuple[VelocityNet, dict]:
    stem = Path(path).with_suffix("")
    man_path, arr_path = stem.with_suffix(".json"), stem.with_suffix(".npz")
    for p in (man_path, arr_path):
        if not p.exists():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    manifest = json.loads(man_path.read_text())
    net = VelocityNet(NetConfig(**manifest["config"]))
    with np.load(arr_path) as data:
        state = {}
        for entry in manifest["arrays"]:
            arr = data[entry["name"]]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"array {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
            state[entry["name"]] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net, manifest.get("extra", {})
