import csv
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcm.attnjvp import (BENCH_COLUMNS, AllocationCounter, AttentionInputs, BlockSpec, attention_dense,
                         attention_jvp_blocked, attention_jvp_causal, attention_primal, attention_stabilized,
                         kernel_bench)
from rcm.dualcore import finite_difference_jvp, relative_error

D = torch.float64


def rand_inputs(g, n1, n2, d, **kw):
    return AttentionInputs.random(n1, n2, d, generator=g, **kw)


def test_zero_q_k_tangents_reduce_to_p_tv(gen):
    inp = rand_inputs(gen, 5, 7, 4)
    inp = AttentionInputs(inp.Q, inp.K, inp.V, torch.zeros_like(inp.tQ), torch.zeros_like(inp.tK), inp.tV)
    out = attention_dense(inp)
    P = torch.softmax(inp.Q @ inp.K.T, dim=-1)
    assert torch.allclose(out.tO, P @ inp.tV, atol=1e-14, rtol=0)


def test_singleton_attention_passes_tv(gen):
    inp = rand_inputs(gen, 1, 1, 3)
    for fn in (attention_dense, lambda x: attention_jvp_blocked(x, BlockSpec(1, 1))):
        out = fn(inp)
        assert torch.allclose(out.O, inp.V, atol=1e-15, rtol=0)
        assert torch.allclose(out.tO, inp.tV, atol=1e-15, rtol=0)


def test_dense_matches_fd(gen):
    inp = rand_inputs(gen, 5, 7, 4)
    fd = finite_difference_jvp(lambda q, k, v: attention_primal(q, k, v), (inp.Q, inp.K, inp.V),
                               (inp.tQ, inp.tK, inp.tV), 1e-5)
    assert relative_error(attention_dense(inp).tO, fd) <= 1e-6


def test_single_block_bitwise_equals_stabilized(gen):
    for prec in ("single", "double"):
        inp = rand_inputs(gen, 9, 11, 4, precision=prec)
        a = attention_jvp_blocked(inp, BlockSpec(9, 11))
        b = attention_stabilized(inp)
        assert torch.equal(a.O, b.O) and torch.equal(a.tO, b.tO) and torch.equal(a.L, b.L)


def test_zero_tangents_give_exact_zero(gen):
    inp = rand_inputs(gen, 13, 6, 4)
    z = AttentionInputs(inp.Q, inp.K, inp.V, *(torch.zeros_like(x) for x in (inp.tQ, inp.tK, inp.tV)))
    for blocks in (BlockSpec(1, 1), BlockSpec(4, 5), BlockSpec(13, 6)):
        assert torch.count_nonzero(attention_jvp_blocked(z, blocks).tO) == 0


def test_block_sweep_matches_dense(gen):
    inp = rand_inputs(gen, 33, 17, 8)
    ref = attention_dense(inp)
    outs = []
    for br in (1, 4, 16, 33):
        for bc in (1, 5, 17):
            got = attention_jvp_blocked(inp, BlockSpec(br, bc))
            assert float((got.O - ref.O).abs().max()) <= 1e-10
            assert float((got.tO - ref.tO).abs().max()) <= 1e-10
            assert float((got.L - ref.L).abs().max()) <= 1e-10
            outs.append(got.tO)
    for o in outs[1:]:
        assert float((o - outs[0]).abs().max()) <= 1e-10


def test_streaming_lse_matches_dense_rows(gen):
    inp = rand_inputs(gen, 10, 23, 4)
    got = attention_jvp_blocked(inp, BlockSpec(3, 7))
    assert float((got.L - torch.logsumexp(inp.Q @ inp.K.T, dim=-1)).abs().max()) <= 1e-10


def test_rejects_bad_blocks_and_shapes(gen):
    with pytest.raises(ValueError, match="block sizes"):
        BlockSpec(0, 3)
    inp = rand_inputs(gen, 4, 4, 2)
    with pytest.raises(ValueError, match="mix dtypes"):
        AttentionInputs(inp.Q.float(), inp.K, inp.V, inp.tQ, inp.tK, inp.tV)
    with pytest.raises(ValueError, match="N1 == N2"):
        rand_inputs(gen, 3, 4, 2, causal=True)


def test_causal_n1_identical_to_unmasked(gen):
    inp = rand_inputs(gen, 1, 1, 4)
    a = attention_jvp_causal(inp, BlockSpec(1, 1))
    b = attention_jvp_blocked(inp, BlockSpec(1, 1))
    assert torch.equal(a.O, b.O) and torch.equal(a.tO, b.tO)


def test_causal_first_row_is_v0(gen):
    inp = rand_inputs(gen, 6, 6, 3)
    out = attention_jvp_causal(inp, BlockSpec(2, 4))
    assert torch.equal(out.O[0], inp.V[0])
    # (a + b) - r o cancels the score-tangent terms up to one rounding
    assert torch.allclose(out.tO[0], inp.tV[0], atol=1e-14, rtol=0)


def test_causal_matches_masked_dense(gen):
    inp = rand_inputs(gen, 12, 12, 4, causal=True)
    ref = attention_dense(inp)
    # independent masked oracle
    S = inp.Q @ inp.K.T
    mask = torch.triu(torch.ones(12, 12, dtype=torch.bool), 1)
    P = torch.softmax(S.masked_fill(mask, -math.inf), dim=-1)
    assert torch.allclose(ref.O, P @ inp.V, atol=1e-12, rtol=0)
    for blocks in (BlockSpec(1, 1), BlockSpec(5, 3), BlockSpec(12, 12), BlockSpec(4, 7)):
        got = attention_jvp_causal(inp, blocks)
        assert float((got.O - ref.O).abs().max()) <= 1e-10
        assert float((got.tO - ref.tO).abs().max()) <= 1e-10


def test_row_shift_invariance_through_kernel(gen):
    # constant keys make every score in a row equal; shifting the row's tangent by a constant leaves tO unchanged
    n, d = 6, 3
    inp = rand_inputs(gen, n, n, d)
    K = torch.ones(n, d, dtype=D)
    tq_shift = torch.randn(n, 1, dtype=D, generator=gen) * torch.ones(1, d, dtype=D) / d
    base = AttentionInputs(inp.Q, K, inp.V, inp.tQ, torch.zeros_like(K), inp.tV)
    shifted = AttentionInputs(inp.Q, K, inp.V, inp.tQ + tq_shift, torch.zeros_like(K), inp.tV)
    a = attention_jvp_blocked(base, BlockSpec(2, 4)).tO
    b = attention_jvp_blocked(shifted, BlockSpec(2, 4)).tO
    assert float((a - b).abs().max()) <= 1e-10


def test_doubling_tangents_doubles_output(gen):
    inp = rand_inputs(gen, 9, 14, 4)
    dbl = AttentionInputs(inp.Q, inp.K, inp.V, 2 * inp.tQ, 2 * inp.tK, 2 * inp.tV)
    a = attention_jvp_blocked(inp, BlockSpec(4, 5)).tO
    b = attention_jvp_blocked(dbl, BlockSpec(4, 5)).tO
    assert float((b - 2 * a).abs().max()) <= 1e-12


def test_batched_heads_match_per_problem(gen):
    inp = AttentionInputs.random(5, 7, 4, batch=(2, 3), generator=gen)
    got = attention_jvp_blocked(inp, BlockSpec(2, 3))
    for b in range(2):
        for h in range(3):
            one = AttentionInputs(*(x[b, h] for x in (inp.Q, inp.K, inp.V, inp.tQ, inp.tK, inp.tV)))
            assert torch.equal(got.tO[b, h], attention_jvp_blocked(one, BlockSpec(2, 3)).tO)


def test_working_set_independent_of_sequence_length(gen):
    peaks = []
    for n2 in (32, 128):
        c = AllocationCounter()
        attention_jvp_blocked(rand_inputs(gen, 16, n2, 8), BlockSpec(4, 8), counter=c)
        peaks.append(c.peak)
    assert peaks[0] == peaks[1]
    br, bc, d = 4, 8, 8
    assert peaks[0] <= 4 * (br * bc) + 8 * (br * d) + 4 * bc * d + 6 * br


def test_single_precision_tolerance(gen):
    inp = rand_inputs(gen, 20, 31, 8, precision="single")
    dbl = AttentionInputs(*(x.double() for x in (inp.Q, inp.K, inp.V, inp.tQ, inp.tK, inp.tV)))
    got = attention_jvp_blocked(inp, BlockSpec(6, 7))
    ref = attention_dense(dbl)
    assert relative_error(got.tO.double(), ref.tO) <= 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.sampled_from([1, 4, 8]), st.integers(1, 30), st.integers(1, 30),
       st.integers(0, 2**31 - 1))
def test_property_blocked_equals_dense(n1, n2, d, br, bc, seed):
    g = torch.Generator().manual_seed(seed)
    inp = rand_inputs(g, n1, n2, d)
    got, ref = attention_jvp_blocked(inp, BlockSpec(br, bc)), attention_dense(inp)
    assert relative_error(got.O, ref.O) <= 1e-10
    assert relative_error(got.tO, ref.tO) <= 1e-10


def test_bench_writes_two_rows_per_size(tmp_path):
    out = tmp_path / "bench.csv"
    rows = kernel_bench([(8, 8, 4), (64, 64, 8)], BlockSpec(16, 16), repeats=1, out_path=out)
    assert len(rows) == 4
    with out.open() as fh:
        r = list(csv.DictReader(fh))
    assert list(r[0].keys()) == BENCH_COLUMNS and len(r) == 4
    assert all(float(x["max_abs_err_vs_dense"]) <= 1e-8 for x in r)
    with pytest.raises(ValueError):
        kernel_bench([(8, 8, 4)], BlockSpec(4, 4), repeats=0)
