import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcm.dualcore import (DualTensor, activation, dual_cat, dual_cos, dual_linear, dual_matmul, dual_pointwise,
                          dual_rmsnorm, dual_sin, dual_softmax_rows, finite_difference_jvp, relative_error,
                          rmsnorm, softmax_rows)

D = torch.float64


def rnd(g, *shape):
    return torch.randn(*shape, dtype=D, generator=g)


def test_matmul_identity_zero_tangents(gen):
    B = rnd(gen, 2, 3)
    out = dual_matmul(DualTensor.constant(torch.eye(2, dtype=D)), DualTensor.constant(B))
    assert torch.equal(out.primal, B)
    assert torch.equal(out.tangent, torch.zeros_like(B))


def test_matmul_scalar_product_rule():
    out = dual_matmul(DualTensor(torch.tensor([[2.0]], dtype=D), torch.tensor([[1.0]], dtype=D)),
                      DualTensor(torch.tensor([[3.0]], dtype=D), torch.tensor([[5.0]], dtype=D)))
    assert out.primal.item() == 6.0
    assert out.tangent.item() == 13.0


def test_matmul_matches_fd(gen):
    A, tA, B, tB = rnd(gen, 4, 3), rnd(gen, 4, 3), rnd(gen, 3, 2), rnd(gen, 3, 2)
    out = dual_matmul(DualTensor(A, tA), DualTensor(B, tB))
    fd = finite_difference_jvp(lambda a, b: a @ b, (A, B), (tA, tB), 1e-5)
    assert relative_error(out.tangent, fd) <= 1e-8


def test_matmul_dimension_report():
    with pytest.raises(ValueError, match=r"\(3 != 2\)"):
        dual_matmul(DualTensor.constant(torch.zeros(2, 3, dtype=D)), DualTensor.constant(torch.zeros(2, 2, dtype=D)))


def test_dual_invariants_rejected():
    with pytest.raises(ValueError, match="shape"):
        DualTensor(torch.zeros(2, dtype=D), torch.zeros(3, dtype=D))
    with pytest.raises(ValueError, match="dtype"):
        DualTensor(torch.zeros(2, dtype=D), torch.zeros(2, dtype=torch.float32))


def test_softmax_singleton_rows(gen):
    out = dual_softmax_rows(DualTensor(rnd(gen, 4, 1), rnd(gen, 4, 1)))
    assert torch.equal(out.primal, torch.ones(4, 1, dtype=D))
    assert torch.equal(out.tangent, torch.zeros(4, 1, dtype=D))


def test_softmax_row_constant_shift_in_tangent(gen):
    S, tS = rnd(gen, 3, 5), rnd(gen, 3, 5)
    shift = rnd(gen, 3, 1)
    a = dual_softmax_rows(DualTensor(S, tS)).tangent
    b = dual_softmax_rows(DualTensor(S, tS + shift)).tangent
    assert torch.allclose(a, b, atol=1e-14, rtol=0)


def test_softmax_matches_fd(gen):
    S, tS = rnd(gen, 3, 5), rnd(gen, 3, 5)
    out = dual_softmax_rows(DualTensor(S, tS))
    assert relative_error(out.tangent, finite_difference_jvp(softmax_rows, S, tS)) <= 1e-8


def test_rmsnorm_zero_tangent(gen):
    x = rnd(gen, 6)
    out = dual_rmsnorm(DualTensor.constant(x), rnd(gen, 6), 1e-5)
    assert torch.equal(out.tangent, torch.zeros(6, dtype=D))


def test_rmsnorm_constant_vector_eps0(gen):
    for v in (2.5, -0.7):
        x = torch.full((5,), v, dtype=D)
        tx = rnd(gen, 5)
        out = dual_rmsnorm(DualTensor(x, tx), torch.ones(5, dtype=D), 0.0)
        assert torch.allclose(out.primal, torch.full((5,), float(torch.sign(torch.tensor(v))), dtype=D),
                              atol=1e-15, rtol=0)
        fd = finite_difference_jvp(lambda z: rmsnorm(z, torch.ones(5, dtype=D), 0.0), x, tx)
        assert relative_error(out.tangent, fd) <= 1e-7
        # only the component orthogonal to the constant direction survives
        assert abs(float(out.tangent.sum())) <= 1e-12


def test_rmsnorm_matches_fd(gen):
    x, tx, w = rnd(gen, 3, 7), rnd(gen, 3, 7), rnd(gen, 7)
    out = dual_rmsnorm(DualTensor(x, tx), w, 1e-5)
    assert relative_error(out.tangent, finite_difference_jvp(lambda z: rmsnorm(z, w, 1e-5), x, tx)) <= 1e-7


def test_rmsnorm_rejects_bad_weight(gen):
    with pytest.raises(ValueError, match="weight length"):
        dual_rmsnorm(DualTensor.constant(rnd(gen, 4)), rnd(gen, 3), 1e-5)


def test_pointwise_identity_passthrough(gen):
    x = DualTensor(rnd(gen, 5), rnd(gen, 5))
    out = dual_pointwise(x, "identity")
    assert torch.equal(out.tangent, x.tangent)


def test_silu_derivative_at_zero():
    out = dual_pointwise(DualTensor(torch.zeros(1, dtype=D), torch.ones(1, dtype=D)), "silu")
    assert out.tangent.item() == 0.5


@pytest.mark.parametrize("kind", ["silu", "gelu-tanh"])
def test_pointwise_matches_fd(gen, kind):
    x, tx = rnd(gen, 50), rnd(gen, 50)
    out = dual_pointwise(DualTensor(x, tx), kind)
    assert relative_error(out.tangent, finite_difference_jvp(lambda z: activation(z, kind), x, tx)) <= 1e-7


def test_pointwise_unknown_kind(gen):
    with pytest.raises(ValueError, match="unknown activation"):
        dual_pointwise(DualTensor.constant(rnd(gen, 2)), "relu6")


def test_fd_exact_on_linear(gen):
    W, x, v = rnd(gen, 3, 4), rnd(gen, 4), rnd(gen, 4)
    for eps in (1e-1, 1.0, 10.0):
        assert torch.allclose(finite_difference_jvp(lambda z: W @ z, x, v, eps), W @ v, atol=1e-12, rtol=0)


def test_fd_square():
    x = torch.tensor(3.0, dtype=D)
    assert abs(float(finite_difference_jvp(lambda z: z * z, x, torch.tensor(1.0, dtype=D), 1e-4)) - 6.0) <= 1e-8


def test_fd_rejects_nonpositive_eps(gen):
    with pytest.raises(ValueError):
        finite_difference_jvp(lambda z: z, rnd(gen, 2), rnd(gen, 2), 0.0)


def test_sin_cos_linear_cat(gen):
    x, tx, W, b = rnd(gen, 3, 4), rnd(gen, 3, 4), rnd(gen, 5, 4), rnd(gen, 5)
    for op, f in ((dual_sin, torch.sin), (dual_cos, torch.cos)):
        assert relative_error(op(DualTensor(x, tx)).tangent, finite_difference_jvp(f, x, tx)) <= 1e-8
    lin = dual_linear(DualTensor(x, tx), W, b)
    assert relative_error(lin.tangent, tx @ W.T) <= 1e-15
    cat = dual_cat([DualTensor(x, tx), DualTensor(x, 2 * tx)])
    assert torch.equal(cat.tangent[:, 4:], 2 * tx)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["softmax", "rmsnorm", "silu", "gelu-tanh", "matmul"]))
def test_tangent_linearity(seed, op):
    g = torch.Generator().manual_seed(seed)
    x, v1, v2, w, M = rnd(g, 3, 6), rnd(g, 3, 6), rnd(g, 3, 6), rnd(g, 6), rnd(g, 6, 2)

    def tan(v):
        d = DualTensor(x, v)
        if op == "softmax":
            return dual_softmax_rows(d).tangent
        if op == "rmsnorm":
            return dual_rmsnorm(d, w, 1e-6).tangent
        if op == "matmul":
            return dual_matmul(d, DualTensor.constant(M)).tangent
        return dual_pointwise(d, op).tangent

    assert torch.allclose(tan(2 * v1), 2 * tan(v1), atol=1e-13, rtol=0)
    assert torch.allclose(tan(v1 + v2), tan(v1) + tan(v2), atol=1e-13, rtol=0)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_determinism(gen, dtype):
    x, tx, w = rnd(gen, 4, 8).to(dtype), rnd(gen, 4, 8).to(dtype), rnd(gen, 8).to(dtype)

    def run():
        h = dual_rmsnorm(DualTensor(x, tx), w, 1e-6)
        return dual_softmax_rows(dual_pointwise(h, "silu"))

    a, b = run(), run()
    assert torch.equal(a.primal, b.primal) and torch.equal(a.tangent, b.tangent)


def test_tangent_never_requires_grad(gen):
    w = torch.nn.Parameter(rnd(gen, 5))
    out = dual_rmsnorm(DualTensor(rnd(gen, 2, 5), rnd(gen, 2, 5)), w, 1e-6)
    assert out.primal.requires_grad
    assert not out.tangent.requires_grad
