"""In-process simulation of Ulysses context parallelism for the JVP kernel.

Workers are entries of a list. Every exchange is written as an explicit
send/receive schedule over those entries, so the data movement is a pure
permutation and can be checked element by element.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .attnjvp import AttentionInputs, BlockSpec, attention_jvp_blocked

AXES = {"L": 2, "H": 1}


@dataclass(frozen=True)
class ShardedSeq:
    P: int
    shards: tuple
    axis: str  # "L" or "H"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be 'L' or 'H', got {self.axis!r}")
        if len(self.shards) != self.P:
            raise ValueError(f"expected {self.P} shards, got {len(self.shards)}")
        shapes = {tuple(s.shape) for s in self.shards}
        if len(shapes) != 1 or len(next(iter(shapes))) != 4:
            raise ValueError(f"shards must be equally shaped [B,H,L,C] slices, got {sorted(shapes)}")

    @property
    def full_shape(self) -> tuple:
        b, h, l, c = self.shards[0].shape
        return (b, h * self.P, l, c) if self.axis == "H" else (b, h, l * self.P, c)


def shard(x: torch.Tensor, P: int) -> ShardedSeq:
    """Split ``[B,H,L,C]`` along L into ``P`` contiguous slices."""
    if x.ndim != 4:
        raise ValueError(f"expected a [B,H,L,C] tensor, got shape {tuple(x.shape)}")
    if P < 1:
        raise ValueError("P must be >= 1")
    L = x.shape[2]
    if L % P:
        raise ValueError(f"sequence length L={L} is not divisible by P={P}; L must be a multiple of {P}")
    n = L // P
    return ShardedSeq(P, tuple(x[:, :, i * n:(i + 1) * n].clone() for i in range(P)), "L")


def unshard(s: ShardedSeq) -> torch.Tensor:
    return torch.cat(s.shards, dim=AXES[s.axis])


def all_to_all(s: ShardedSeq, from_axis: str = "L", to_axis: str = "H") -> ShardedSeq:
    """Redistribute from sharding along ``from_axis`` to sharding along ``to_axis``.

    Worker ``src`` sends worker ``dst`` the ``dst``-th slice of its local
    ``to_axis``; ``dst`` concatenates the messages along ``from_axis`` in
    source order.
    """
    if s.axis != from_axis:
        raise ValueError(f"input is sharded along {s.axis}, not {from_axis}")
    if {from_axis, to_axis} != {"L", "H"}:
        raise ValueError("all_to_all moves between the 'L' and 'H' axes")
    P = s.P
    split_dim, cat_dim = AXES[to_axis], AXES[from_axis]
    n = s.shards[0].shape[split_dim]
    if n % P:
        raise ValueError(f"target axis {to_axis} has local size {n}, not divisible by P={P}")
    chunk = n // P
    # mailbox[dst][src]
    mailbox = [[None] * P for _ in range(P)]
    for src, local in enumerate(s.shards):
        for dst in range(P):
            mailbox[dst][src] = local.narrow(split_dim, dst * chunk, chunk).clone()
    return ShardedSeq(P, tuple(torch.cat(mailbox[dst], dim=cat_dim) for dst in range(P)), to_axis)


def _check_consistent(seqs) -> None:
    ref = seqs[0]
    for s in seqs[1:]:
        if s.P != ref.P or s.axis != ref.axis:
            raise ValueError("inconsistent shard metadata: worker count or sharded axis differ")
    if ref.axis != "L":
        raise ValueError("cp_attention_jvp expects sequence-sharded (axis 'L') inputs")
    q_shape = tuple(ref.shards[0].shape)
    for s in seqs[1:]:
        shp = tuple(s.shards[0].shape)
        if shp[:2] != q_shape[:2] or shp[3] != q_shape[3]:
            raise ValueError(f"inconsistent shard shapes {q_shape} vs {shp}")
    if seqs[1].shards[0].shape != seqs[2].shards[0].shape:
        raise ValueError("K and V shards differ in shape")


def cp_attention_jvp(Qs: ShardedSeq, Ks: ShardedSeq, Vs: ShardedSeq,
                     tQs: ShardedSeq, tKs: ShardedSeq, tVs: ShardedSeq,
                     blocks: BlockSpec, causal: bool = False) -> tuple[ShardedSeq, ShardedSeq]:
    """Sequence-parallel attention JVP; returns L-sharded ``(O, tO)``."""
    seqs = (Qs, Ks, Vs, tQs, tKs, tVs)
    _check_consistent(seqs)
    if Qs.shards[0].shape != tQs.shards[0].shape or Ks.shards[0].shape != tKs.shards[0].shape:
        raise ValueError("tangent shards must match their primal shards")
    P = Qs.P
    H = Qs.shards[0].shape[1]
    if H % P:
        raise ValueError(f"H={H} heads cannot be split over P={P} workers")
    q, k, v, tq, tk, tv = (all_to_all(s, "L", "H") for s in seqs)
    outs, touts = [], []
    for w in range(P):
        res = attention_jvp_blocked(
            AttentionInputs(q.shards[w], k.shards[w], v.shards[w], tq.shards[w], tk.shards[w], tv.shards[w],
                            causal=causal),
            blocks,
        )
        outs.append(res.O)
        touts.append(res.tO)
    o = all_to_all(ShardedSeq(P, tuple(outs), "H"), "H", "L")
    t_o = all_to_all(ShardedSeq(P, tuple(touts), "H"), "H", "L")
    return o, t_o


def cp_check(P: int, B: int, H: int, L: int, C: int, precision: str = "double",
             blocks: Optional[BlockSpec] = None, seed: int = 0) -> bool:
    """Bitwise comparison of the sharded run against the unsharded kernel."""
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.float64 if precision == "double" else torch.float32
    xs = [torch.randn(B, H, L, C, dtype=torch.float64, generator=gen).to(dtype) for _ in range(6)]
    blocks = blocks or BlockSpec(max(1, L // 3), max(1, L // 5))
    ref = attention_jvp_blocked(AttentionInputs(*xs[:3], *xs[3:]), blocks)
    o, t_o = cp_attention_jvp(*(shard(x, P) for x in xs), blocks)
    return torch.equal(unshard(o), ref.O) and torch.equal(unshard(t_o), ref.tO)
