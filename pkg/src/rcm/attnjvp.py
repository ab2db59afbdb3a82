"""Blocked streaming attention with a fused Jacobian-vector product.

The blocked kernel walks column blocks of K/V once per row block of Q, keeping
a running row max ``m``, normaliser ``l``, output accumulator ``o``, the two
tangent accumulators ``a = P~ tV`` and ``b = H~ V`` and the tangent row sum
``r = rowsum(H~)``. All five are rescaled by ``exp(m_old - m_new)`` whenever the
running max moves. At the end of a row block::

    O  = o / l
    L  = m + log(l)
    tO = (a + b - r * O) / l

``r`` carries one factor of ``l`` and ``O`` is already normalised, so
``r * O`` has the same scaling as ``a`` and ``b``; this is exactly
``P tV + H V - diag(rowsum H) O`` with ``H = P * tS``.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from .dualcore import precision_of, softmax_rows


@dataclass(frozen=True)
class AttentionInputs:
    Q: torch.Tensor
    K: torch.Tensor
    V: torch.Tensor
    tQ: torch.Tensor
    tK: torch.Tensor
    tV: torch.Tensor
    causal: bool = False

    def __post_init__(self):
        dts = {x.dtype for x in (self.Q, self.K, self.V, self.tQ, self.tK, self.tV)}
        if len(dts) != 1:
            raise ValueError(f"attention inputs mix dtypes: {sorted(map(str, dts))}")
        if self.Q.ndim < 2:
            raise ValueError("Q must have shape [..., N1, d]")
        if self.Q.shape != self.tQ.shape:
            raise ValueError(f"Q {tuple(self.Q.shape)} and tQ {tuple(self.tQ.shape)} differ")
        if not (self.K.shape == self.tK.shape == self.V.shape == self.tV.shape):
            raise ValueError("K, tK, V, tV must share one shape")
        if self.K.shape[-1] != self.Q.shape[-1] or self.K.shape[:-2] != self.Q.shape[:-2]:
            raise ValueError(
                f"Q {tuple(self.Q.shape)} and K {tuple(self.K.shape)} disagree on batch dims or head dim"
            )
        if self.Q.shape[-1] < 1:
            raise ValueError("head dimension d must be >= 1")
        if self.causal and self.Q.shape[-2] != self.K.shape[-2]:
            raise ValueError(
                f"causal attention needs N1 == N2, got N1={self.Q.shape[-2]} N2={self.K.shape[-2]}"
            )

    @property
    def precision(self) -> str:
        return precision_of(self.Q)

    @classmethod
    def random(cls, n1: int, n2: int, d: int, *, batch: Sequence[int] = (), precision: str = "double",
               causal: bool = False, generator: Optional[torch.Generator] = None) -> "AttentionInputs":
        """Unit-scale Gaussian inputs, drawn in double then cast."""
        def draw(n):
            x = torch.randn(*batch, n, d, dtype=torch.float64, generator=generator)
            return x.to(torch.float32) if precision == "single" else x
        return cls(Q=draw(n1), K=draw(n2), V=draw(n2), tQ=draw(n1), tK=draw(n2), tV=draw(n2), causal=causal)


@dataclass(frozen=True)
class AttentionOutputs:
    O: torch.Tensor
    L: torch.Tensor
    tO: torch.Tensor


@dataclass(frozen=True)
class BlockSpec:
    B_r: int
    B_c: int

    def __post_init__(self):
        if self.B_r < 1 or self.B_c < 1:
            raise ValueError(f"block sizes must be >= 1, got B_r={self.B_r} B_c={self.B_c}")


@dataclass
class AllocationCounter:
    """Largest per-iteration working set (in elements) seen by the blocked kernel."""

    peak: int = 0
    iterations: int = 0

    def observe(self, *tensors: torch.Tensor) -> None:
        n = sum(t.numel() for t in tensors)
        self.iterations += 1
        self.peak = max(self.peak, n)


def _mask(rows: range, cols: range) -> torch.Tensor:
    r = torch.arange(rows.start, rows.stop).unsqueeze(1)
    c = torch.arange(cols.start, cols.stop).unsqueeze(0)
    return c > r


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(-1, *x.shape[-2:])


def _per_problem(inp: AttentionInputs, fn) -> AttentionOutputs:
    """Run ``fn`` over every leading (batch, head) index independently."""
    lead = inp.Q.shape[:-2]
    if not lead:
        return fn(inp.Q, inp.K, inp.V, inp.tQ, inp.tK, inp.tV)
    qs, ks, vs = _flat(inp.Q), _flat(inp.K), _flat(inp.V)
    tqs, tks, tvs = _flat(inp.tQ), _flat(inp.tK), _flat(inp.tV)
    outs = [fn(qs[i], ks[i], vs[i], tqs[i], tks[i], tvs[i]) for i in range(qs.shape[0])]
    n1, d = inp.Q.shape[-2:]
    return AttentionOutputs(
        O=torch.stack([o.O for o in outs]).reshape(*lead, n1, d),
        L=torch.stack([o.L for o in outs]).reshape(*lead, n1),
        tO=torch.stack([o.tO for o in outs]).reshape(*lead, n1, d),
    )


# ---------------------------------------------------------------------------
# dense references


def attention_dense(inp: AttentionInputs) -> AttentionOutputs:
    """Matrix-form oracle: normalised ``P`` and ``tO = P tV + H V - diag(rowsum H) O``."""

    def one(q, k, v, tq, tk, tv):
        s = q @ k.T
        ts = tq @ k.T + q @ tk.T
        if inp.causal:
            mask = _mask(range(q.shape[0]), range(k.shape[0]))
            s = s.masked_fill(mask, -math.inf)
            ts = ts.masked_fill(mask, 0.0)
        p = softmax_rows(s)
        o = p @ v
        h = p * ts
        t_o = p @ tv + h @ v - h.sum(dim=1, keepdim=True) * o
        return AttentionOutputs(O=o, L=torch.logsumexp(s, dim=1), tO=t_o)

    return _per_problem(inp, one)


def _stabilized(q, k, v, tq, tk, tv, causal):
    s = q @ k.T
    ts = tq @ k.T + q @ tk.T
    mask = None
    if causal:
        mask = _mask(range(q.shape[0]), range(k.shape[0]))
        s = s.masked_fill(mask, torch.finfo(s.dtype).min)
        ts = ts.masked_fill(mask, 0.0)
    m = s.amax(dim=1)
    p = torch.exp(s - m[:, None])
    if mask is not None:
        p = p.masked_fill(mask, 0.0)
    l = p.sum(dim=1)
    h = p * ts
    o = (p @ v) / l[:, None]
    t_o = (p @ tv + h @ v - h.sum(dim=1)[:, None] * o) / l[:, None]
    return AttentionOutputs(O=o, L=m + torch.log(l), tO=t_o)


def attention_stabilized(inp: AttentionInputs) -> AttentionOutputs:
    """Direct max-subtracted evaluation in the kernel's accumulator form."""
    return _per_problem(inp, lambda *xs: _stabilized(*xs, inp.causal))


def attention_primal(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = False) -> torch.Tensor:
    """Attention output only, batched over leading dims and autograd-friendly.

    Uses the same operation sequence as the single-block kernel, so a network
    run without tangents matches its tangent-carrying run bitwise.
    """
    s = q @ k.transpose(-1, -2)
    mask = None
    if causal:
        mask = _mask(range(q.shape[-2]), range(k.shape[-2]))
        s = s.masked_fill(mask, torch.finfo(s.dtype).min)
    m = s.amax(dim=-1, keepdim=True)
    p = torch.exp(s - m)
    if mask is not None:
        p = p.masked_fill(mask, 0.0)
    return (p @ v) / p.sum(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# blocked kernel


def _blocked_one(q, k, v, tq, tk, tv, br, bc, causal, counter):
    n1, d = q.shape
    n2 = k.shape[0]
    dtype = q.dtype
    neg = torch.finfo(dtype).min
    out_o = torch.empty(n1, d, dtype=dtype)
    out_l = torch.empty(n1, dtype=dtype)
    out_t = torch.empty(n1, d, dtype=dtype)
    br, bc = min(br, n1), min(bc, n2)

    for i0 in range(0, n1, br):
        i1 = min(i0 + br, n1)
        qi, tqi = q[i0:i1], tq[i0:i1]
        rows = i1 - i0
        m = torch.full((rows,), -math.inf, dtype=dtype)
        l = torch.zeros(rows, dtype=dtype)
        r = torch.zeros(rows, dtype=dtype)
        o = torch.zeros(rows, d, dtype=dtype)
        a = torch.zeros(rows, d, dtype=dtype)
        b = torch.zeros(rows, d, dtype=dtype)
        for j0 in range(0, n2, bc):
            if causal and j0 > i1 - 1:
                break  # every remaining column is above the diagonal
            j1 = min(j0 + bc, n2)
            kj, tkj, vj, tvj = k[j0:j1], tk[j0:j1], v[j0:j1], tv[j0:j1]
            s = qi @ kj.T
            ts = tqi @ kj.T + qi @ tkj.T
            mask = None
            if causal and j1 - 1 > i0:
                mask = _mask(range(i0, i1), range(j0, j1))
                s = s.masked_fill(mask, neg)
                ts = ts.masked_fill(mask, 0.0)
            m_new = torch.maximum(m, s.amax(dim=1))
            p = torch.exp(s - m_new[:, None])
            if mask is not None:
                p = p.masked_fill(mask, 0.0)
            scale = torch.exp(m - m_new)
            l = scale * l + p.sum(dim=1)
            o = scale[:, None] * o + p @ vj
            a = scale[:, None] * a + p @ tvj
            h = p * ts
            r = scale * r + h.sum(dim=1)
            b = scale[:, None] * b + h @ vj
            m = m_new
            if counter is not None:
                counter.observe(qi, tqi, kj, tkj, vj, tvj, s, ts, p, h, o, a, b, m, l, r, scale)
        o = o / l[:, None]
        out_o[i0:i1] = o
        out_l[i0:i1] = m + torch.log(l)
        out_t[i0:i1] = (a + b - r[:, None] * o) / l[:, None]
    return AttentionOutputs(O=out_o, L=out_l, tO=out_t)


def attention_jvp_blocked(inp: AttentionInputs, blocks: BlockSpec,
                          counter: Optional[AllocationCounter] = None) -> AttentionOutputs:
    """Single streaming pass producing ``O``, log-sum-exp ``L`` and tangent ``tO``.

    Ragged tail blocks are processed with reduced extents. Block sizes larger
    than the sequence are clamped to it. Honors ``inp.causal``.
    """
    if not isinstance(blocks, BlockSpec):
        raise TypeError("blocks must be a BlockSpec")
    with torch.no_grad():
        return _per_problem(
            inp, lambda *xs: _blocked_one(*xs, blocks.B_r, blocks.B_c, inp.causal, counter)
        )


def attention_jvp_causal(inp: AttentionInputs, blocks: BlockSpec,
                         counter: Optional[AllocationCounter] = None) -> AttentionOutputs:
    if inp.Q.shape[-2] != inp.K.shape[-2]:
        raise ValueError(f"causal attention needs N1 == N2, got {inp.Q.shape[-2]} and {inp.K.shape[-2]}")
    if not inp.causal:
        inp = AttentionInputs(inp.Q, inp.K, inp.V, inp.tQ, inp.tK, inp.tV, causal=True)
    return attention_jvp_blocked(inp, blocks, counter)


# ---------------------------------------------------------------------------
# benchmark

BENCH_COLUMNS = ["N1", "N2", "d", "Br", "Bc", "variant", "median_seconds", "max_abs_err_vs_dense"]


def _max_abs_err(x: AttentionOutputs, ref: AttentionOutputs) -> float:
    return max(float((x.O - ref.O).abs().max()), float((x.tO - ref.tO).abs().max()),
               float((x.L - ref.L).abs().max()))


def kernel_bench(sizes: Iterable[tuple[int, int, int]], blocks: BlockSpec, repeats: int = 3,
                 out_path: Optional[str | Path] = None, precision: str = "double", seed: int = 0,
                 check_tol: float = 1e-8) -> list[dict]:
    """Median wall time of dense vs blocked per size; optionally written as CSV.

    Outputs are compared before timing; a disagreement beyond ``check_tol``
    raises instead of producing a timing row.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    rows = []
    for n1, n2, d in sizes:
        inp = AttentionInputs.random(n1, n2, d, precision=precision, generator=gen)
        ref = attention_dense(inp)
        got = attention_jvp_blocked(inp, blocks)
        err = _max_abs_err(got, ref)
        if err > check_tol:
            raise AssertionError(f"blocked kernel disagrees with dense at {(n1, n2, d)}: {err:.3e}")
        for variant, fn in (("dense", lambda: attention_dense(inp)),
                            ("blocked", lambda: attention_jvp_blocked(inp, blocks))):
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            rows.append({"N1": n1, "N2": n2, "d": d, "Br": blocks.B_r, "Bc": blocks.B_c, "variant": variant,
                         "median_seconds": statistics.median(times),
                         "max_abs_err_vs_dense": 0.0 if variant == "dense" else err})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    return rows
