"""Synthetic data sets for desk-scale distillation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch

F64 = torch.float64
TASKS = ("gmm2d", "checkerboard2d", "toyseq")


@dataclass(frozen=True)
class TaskSpec:
    name: str = "gmm2d"
    modes: int = 8
    radius: float = 1.0
    mode_std: float = 0.08
    conditional: bool = False
    seq_len: int = 8

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASKS}")
        if self.modes < 1 or self.mode_std <= 0 or self.radius <= 0:
            raise ValueError("task needs modes >= 1, radius > 0 and mode_std > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def num_classes(self) -> int:
        if not self.conditional:
            return 0
        return {"gmm2d": self.modes, "checkerboard2d": 2, "toyseq": 2}[self.name]

    @property
    def data_shape(self) -> tuple:
        return (self.seq_len, 2) if self.name == "toyseq" else (2,)

    def centers(self) -> Optional[torch.Tensor]:
        if self.name != "gmm2d":
            return None
        ang = 2 * math.pi * torch.arange(self.modes, dtype=F64) / self.modes
        return self.radius * torch.stack([torch.cos(ang), torch.sin(ang)], dim=1)

    def sample(self, n: int, generator: torch.Generator) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        """``n`` float64 samples and their class labels (``None`` when unconditional)."""
        if self.name == "gmm2d":
            labels = torch.randint(self.modes, (n,), generator=generator)
            x = self.centers()[labels] + self.mode_std * torch.randn(n, 2, dtype=F64, generator=generator)
        elif self.name == "checkerboard2d":
            # 4x4 board on [-1, 1]^2; class 0 fills cells with i + j even, class 1 the others
            labels = torch.randint(2, (n,), generator=generator) if self.conditional \
                else torch.zeros(n, dtype=torch.long)
            i = torch.randint(4, (n,), generator=generator)
            j = 2 * torch.randint(2, (n,), generator=generator) + (i + labels) % 2
            u = torch.rand(n, 2, dtype=F64, generator=generator)
            x = (torch.stack([i, j], dim=1).to(F64) + u) / 2 - 1
        else:
            labels = torch.randint(2, (n,), generator=generator)
            k = (labels + 1).to(F64)[:, None]
            phase = 2 * math.pi * torch.rand(n, 1, dtype=F64, generator=generator)
            pos = torch.arange(self.seq_len, dtype=F64)[None, :]
            arg = 2 * math.pi * k * pos / self.seq_len + phase
            amp = 1.0 + self.mode_std * torch.randn(n, 1, dtype=F64, generator=generator)
            x = amp[..., None] * torch.stack([torch.cos(arg), torch.sin(arg)], dim=-1)
        return x, (labels if self.conditional else None)
