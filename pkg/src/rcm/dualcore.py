"""Forward-mode tensor primitives.

A :class:`DualTensor` pairs a primal array with a tangent of identical shape
and dtype. Every ``dual_*`` op returns the primal computed by the same plain
function the non-dual code path uses, so a zero-tangent evaluation reproduces
the ordinary forward pass bitwise. Tangent formulas read detached primals:
tangents never enter the autograd graph of the parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import torch

PRECISIONS = {"single": torch.float32, "double": torch.float64}
ACTIVATIONS = ("silu", "gelu-tanh", "identity")

TensorOrTuple = Union[torch.Tensor, Sequence[torch.Tensor]]


def dtype_of(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def precision_of(x: torch.Tensor) -> str:
    for name, dt in PRECISIONS.items():
        if x.dtype == dt:
            return name
    raise ValueError(f"unsupported dtype {x.dtype}")


@dataclass(frozen=True)
class DualTensor:
    primal: torch.Tensor
    tangent: torch.Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ValueError(
                f"primal shape {tuple(self.primal.shape)} != tangent shape {tuple(self.tangent.shape)}"
            )
        if self.primal.dtype != self.tangent.dtype:
            raise ValueError(f"primal dtype {self.primal.dtype} != tangent dtype {self.tangent.dtype}")

    @classmethod
    def constant(cls, x: torch.Tensor) -> "DualTensor":
        return cls(x, torch.zeros_like(x, requires_grad=False))

    @property
    def shape(self):
        return self.primal.shape

    @property
    def dtype(self):
        return self.primal.dtype

    def detach(self) -> "DualTensor":
        return DualTensor(self.primal.detach(), self.tangent.detach())

    def to(self, dtype: torch.dtype) -> "DualTensor":
        return DualTensor(self.primal.to(dtype), self.tangent.to(dtype))

    def reshape(self, *shape) -> "DualTensor":
        return DualTensor(self.primal.reshape(*shape), self.tangent.reshape(*shape))

    def transpose(self, d0: int, d1: int) -> "DualTensor":
        return DualTensor(self.primal.transpose(d0, d1), self.tangent.transpose(d0, d1))

    def __getitem__(self, idx) -> "DualTensor":
        return DualTensor(self.primal[idx], self.tangent[idx])

    def __add__(self, other):
        if isinstance(other, DualTensor):
            return DualTensor(self.primal + other.primal, self.tangent + other.tangent)
        return DualTensor(self.primal + other, self.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DualTensor):
            return DualTensor(self.primal - other.primal, self.tangent - other.tangent)
        return DualTensor(self.primal - other, self.tangent)

    def __neg__(self):
        return DualTensor(-self.primal, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, DualTensor):
            a, b = self.primal.detach(), other.primal.detach()
            return DualTensor(self.primal * other.primal, self.tangent * b + a * other.tangent)
        # plain tensors / scalars are treated as constants
        o = other.detach() if isinstance(other, torch.Tensor) else other
        return DualTensor(self.primal * other, self.tangent * o)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# plain primal functions (shared by forward and forward_jvp)


def softmax_rows(s: torch.Tensor) -> torch.Tensor:
    m = s.amax(dim=-1, keepdim=True)
    p = torch.exp(s - m)
    return p / p.sum(dim=-1, keepdim=True)


def rmsnorm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * weight


_GELU_C = math.sqrt(2.0 / math.pi)


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "silu":
        return x * torch.sigmoid(x)
    if kind == "gelu-tanh":
        return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x.pow(3))))
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_derivative(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "silu":
        s = torch.sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    if kind == "gelu-tanh":
        th = torch.tanh(_GELU_C * (x + 0.044715 * x.pow(3)))
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    if kind == "identity":
        return torch.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    y = x @ weight.T
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# dual ops


def dual_matmul(a: DualTensor, b: DualTensor) -> DualTensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"dual_matmul: inner dimensions disagree, a is {tuple(a.shape)} and b is {tuple(b.shape)} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    pa, pb = a.primal.detach(), b.primal.detach()
    return DualTensor(a.primal @ b.primal, a.tangent @ pb + pa @ b.tangent)


def dual_linear(x: DualTensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> DualTensor:
    """Affine map with constant (parameter) weight and bias."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"dual_linear: input width {x.shape[-1]} != weight in-features {weight.shape[-1]}")
    return DualTensor(linear(x.primal, weight, bias), x.tangent @ weight.detach().T)


def dual_softmax_rows(s: DualTensor) -> DualTensor:
    p = softmax_rows(s.primal)
    pd = p.detach()
    h = pd * s.tangent
    return DualTensor(p, h - pd * h.sum(dim=-1, keepdim=True))


def dual_rmsnorm(x: DualTensor, weight: torch.Tensor, eps: float) -> DualTensor:
    if weight.shape[-1] != x.shape[-1]:
        raise ValueError(f"dual_rmsnorm: weight length {weight.shape[-1]} != last dim {x.shape[-1]}")
    if eps < 0:
        raise ValueError("dual_rmsnorm: eps must be non-negative")
    y = rmsnorm(x.primal, weight, eps)
    xp, w = x.primal.detach(), weight.detach()
    r = torch.rsqrt(xp.pow(2).mean(dim=-1, keepdim=True) + eps)
    dr = -r.pow(3) * (xp * x.tangent).mean(dim=-1, keepdim=True)
    return DualTensor(y, (x.tangent * r + xp * dr) * w)


def dual_pointwise(x: DualTensor, kind: str) -> DualTensor:
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    if kind == "identity":
        return x
    return DualTensor(activation(x.primal, kind), activation_derivative(x.primal.detach(), kind) * x.tangent)


def dual_sin(x: DualTensor) -> DualTensor:
    return DualTensor(torch.sin(x.primal), torch.cos(x.primal.detach()) * x.tangent)


def dual_cos(x: DualTensor) -> DualTensor:
    return DualTensor(torch.cos(x.primal), -torch.sin(x.primal.detach()) * x.tangent)


def dual_cat(xs: Sequence[DualTensor], dim: int = -1) -> DualTensor:
    return DualTensor(torch.cat([x.primal for x in xs], dim=dim), torch.cat([x.tangent for x in xs], dim=dim))


# ---------------------------------------------------------------------------
# oracle


def finite_difference_jvp(
    f: Callable[..., torch.Tensor],
    x: TensorOrTuple,
    v: TensorOrTuple,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Central difference ``(f(x + eps v) - f(x - eps v)) / (2 eps)``.

    ``x`` and ``v`` may be tuples, in which case ``f`` receives the perturbed
    entries as positional arguments.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with torch.no_grad():
        if isinstance(x, torch.Tensor):
            return (f(x + eps * v) - f(x - eps * v)) / (2 * eps)
        plus = [xi + eps * vi for xi, vi in zip(x, v)]
        minus = [xi - eps * vi for xi, vi in zip(x, v)]
        return (f(*plus) - f(*minus)) / (2 * eps)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """``||a - b|| / max(||b||, 1e-12)``."""
    return float(torch.linalg.vector_norm(a - b) / max(float(torch.linalg.vector_norm(b)), 1e-12))
