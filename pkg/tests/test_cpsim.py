import pytest
import torch
from hypothesis import given, settings, strategies as st

from rcm.attnjvp import AttentionInputs, BlockSpec, attention_jvp_blocked
from rcm.cpsim import ShardedSeq, all_to_all, cp_attention_jvp, cp_check, shard, unshard
from rcm.verify import cp_property_grid

D = torch.float64


def test_p1_single_shard(gen):
    x = torch.randn(1, 2, 4, 3, dtype=D, generator=gen)
    s = shard(x, 1)
    assert s.P == 1 and torch.equal(s.shards[0], x)
    assert torch.equal(unshard(all_to_all(s)), x)


def test_l4_p2_rows():
    x = torch.arange(4, dtype=D).reshape(1, 1, 4, 1)
    s = shard(x, 2)
    assert s.shards[0].flatten().tolist() == [0, 1]
    assert s.shards[1].flatten().tolist() == [2, 3]


def test_round_trip_bitwise(gen):
    x = torch.randn(2, 4, 16, 3, dtype=D, generator=gen)
    s = shard(x, 4)
    assert torch.equal(unshard(s), x)
    back = all_to_all(all_to_all(s, "L", "H"), "H", "L")
    assert all(torch.equal(a, b) for a, b in zip(back.shards, s.shards))


def test_indivisible_rejected(gen):
    with pytest.raises(ValueError, match="multiple of 3"):
        shard(torch.zeros(1, 1, 4, 1, dtype=D), 3)
    with pytest.raises(ValueError, match="not divisible"):
        all_to_all(shard(torch.zeros(1, 2, 8, 1, dtype=D), 4))


def test_all_to_all_enumerated_permutation():
    # B=1, H=2, L=2, C=1 with distinct entries: x[0,h,l,0] = 10 h + l
    x = torch.tensor([[[[0.0], [1.0]], [[10.0], [11.0]]]], dtype=D)
    s = all_to_all(shard(x, 2), "L", "H")
    assert s.axis == "H"
    # worker w now owns head w over the full sequence
    assert s.shards[0].flatten().tolist() == [0.0, 1.0]
    assert s.shards[1].flatten().tolist() == [10.0, 11.0]


def test_conservation(gen):
    x = torch.randn(2, 8, 8, 2, dtype=D, generator=gen)
    s = all_to_all(shard(x, 4))
    vals = torch.cat([t.flatten() for t in s.shards])
    assert vals.numel() == x.numel()
    assert torch.equal(torch.sort(vals).values, torch.sort(x.flatten()).values)


def test_worker_symmetry(gen):
    x = torch.randn(1, 4, 8, 2, dtype=D, generator=gen)
    s = shard(x, 2)
    swapped = ShardedSeq(2, (s.shards[1], s.shards[0]), "L")
    a, b = all_to_all(s), all_to_all(swapped)
    # swapping the source workers swaps the source-ordered halves of every destination's sequence
    for w in range(2):
        n = a.shards[w].shape[2] // 2
        assert torch.equal(a.shards[w][:, :, :n], b.shards[w][:, :, n:])
        assert torch.equal(a.shards[w][:, :, n:], b.shards[w][:, :, :n])


def _six(gen, B, H, L, C, dtype=D):
    return [torch.randn(B, H, L, C, dtype=D, generator=gen).to(dtype) for _ in range(6)]


def test_p1_is_local_kernel(gen):
    xs = _six(gen, 1, 2, 8, 2)
    o, t_o = cp_attention_jvp(*(shard(x, 1) for x in xs), BlockSpec(3, 3))
    ref = attention_jvp_blocked(AttentionInputs(*xs), BlockSpec(3, 3))
    assert torch.equal(unshard(o), ref.O) and torch.equal(unshard(t_o), ref.tO)


def test_example_p2_bitwise(gen):
    assert cp_check(2, 1, 4, 8, 2)


def test_p_greater_than_h_rejected(gen):
    xs = _six(gen, 1, 2, 8, 2)
    with pytest.raises(ValueError):
        cp_attention_jvp(*(shard(x, 4) for x in xs), BlockSpec(2, 2))


def test_inconsistent_metadata_rejected(gen):
    xs = _six(gen, 1, 4, 8, 2)
    seqs = [shard(x, 2) for x in xs]
    seqs[3] = shard(xs[3], 4)
    with pytest.raises(ValueError, match="inconsistent"):
        cp_attention_jvp(*seqs, BlockSpec(2, 2))


def test_causal_cp_equivalence(gen):
    xs = _six(gen, 1, 4, 16, 2)
    o, t_o = cp_attention_jvp(*(shard(x, 2) for x in xs), BlockSpec(5, 3), causal=True)
    ref = attention_jvp_blocked(AttentionInputs(*xs, causal=True), BlockSpec(5, 3))
    assert torch.equal(unshard(o), ref.O) and torch.equal(unshard(t_o), ref.tO)


def test_full_grid_bitwise():
    res = cp_property_grid()
    assert len(res) == 36 and all(res.values())


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 6), st.integers(0, 1000))
def test_property_bitwise_any_blocks(P, hmul, lmul, seed):
    H, L = P * hmul, P * lmul
    g = torch.Generator().manual_seed(seed)
    br, bc = (int(v) for v in torch.randint(1, L + 1, (2,), generator=g))
    assert cp_check(P, 1, H, L, 3, "double", BlockSpec(br, bc), seed)
