"""Randomised property grids shared by the CLI and the test-suite."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attnjvp import AttentionInputs, BlockSpec, attention_dense, attention_jvp_blocked
from .cpsim import cp_check
from .dualcore import relative_error

KERNEL_TOL = {"double": 1e-10, "single": 1e-3}
HEAD_DIMS = (1, 4, 8, 16)


@dataclass
class KernelGrid:
    cases: int = 0
    worst: dict = field(default_factory=dict)  # (precision, d) -> max relative error

    def record(self, precision: str, d: int, err: float) -> None:
        key = (precision, d)
        self.worst[key] = max(self.worst.get(key, 0.0), err)
        self.cases += 1

    @property
    def passed(self) -> bool:
        return all(err <= KERNEL_TOL[p] for (p, _), err in self.worst.items())


def kernel_property_grid(cases: int = 1000, seed: int = 0, max_len: int = 64) -> KernelGrid:
    """Blocked kernel vs the dense matrix-form oracle on random sizes and tilings.

    Half the cases run in double, half in single; block sizes are drawn
    independently of the sequence lengths so non-divisors are common.
    """
    gen = torch.Generator().manual_seed(seed)
    grid = KernelGrid()
    for i in range(cases):
        precision = "double" if i % 2 == 0 else "single"
        n1, n2 = (int(v) for v in torch.randint(1, max_len + 1, (2,), generator=gen))
        d = HEAD_DIMS[int(torch.randint(len(HEAD_DIMS), (1,), generator=gen))]
        br, bc = (int(v) for v in torch.randint(1, max_len + 1, (2,), generator=gen))
        causal = n1 == n2 and bool(torch.rand(1, generator=gen) < 0.5)
        inp = AttentionInputs.random(n1, n2, d, precision=precision, causal=causal, generator=gen)
        got = attention_jvp_blocked(inp, BlockSpec(br, bc))
        # the oracle always runs in double on the same (rounded) inputs
        ref = attention_dense(AttentionInputs(*(x.double() for x in (inp.Q, inp.K, inp.V, inp.tQ, inp.tK, inp.tV)),
                                              causal=causal))
        err = max(relative_error(got.O.double(), ref.O), relative_error(got.tO.double(), ref.tO))
        grid.record(precision, d, err)
    return grid


CP_GRID = [(P, H, L) for P in (1, 2, 4) for H in (4, 8) for L in (8, 16, 32)]


def cp_property_grid(seed: int = 0) -> dict:
    """``(P, H, L, precision) -> bitwise equal`` over the standard grid."""
    return {(P, H, L, prec): cp_check(P, 2, H, L, 4, prec, seed=seed + i)
            for i, (P, H, L) in enumerate(CP_GRID) for prec in ("double", "single")}
