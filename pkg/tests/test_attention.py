import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hdwsr import attention
from hdwsr.attention import (
    NBINS,
    AttentionState,
    DFABlock,
    MaskTape,
    attend,
    dtb_threshold,
    propagate,
    run_stack,
    select_mask,
    smm_softmax,
    threshold_mask,
    topk_mask,
)
from hdwsr.errors import ConfigError, ContractError, DimensionError
from hdwsr.ledger import FlopLedger
from oracles import attend_loop, dtb_bruteforce, masked_softmax_loop


def random_attention(rng, n, m):
    logits = rng.standard_normal((n, m)) * rng.uniform(0.5, 4)
    e = np.exp(logits - logits.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 24), m=st.integers(1, 24), seed=st.integers(0, 2**31 - 1))
def test_dtb_matches_bruteforce(n, m, seed):
    a = random_attention(np.random.default_rng(seed), n, m)
    got = dtb_threshold(torch.from_numpy(a))
    assert int(got.k_bin) == dtb_bruteforce(a)


def test_bins_are_right_closed():
    vals = torch.tensor([[0.0, 1 / 512, 1 / 512 + 1e-12, 1.0]], dtype=torch.float64)
    hist = dtb_threshold(vals).histogram
    assert hist[0] == 2 and hist[1] == 1 and hist[NBINS - 1] == 1


def test_two_point_threshold_and_mask():
    # half the entries at 0.1, half at 0.9: any split between separates them;
    # the smallest such bin is the one holding 0.1
    a = torch.tensor([[0.1, 0.9], [0.9, 0.1]], dtype=torch.float64)
    thr = dtb_threshold(a)
    assert int(thr.k_bin) == 51  # 0.1 lies in (51/512, 52/512]
    assert float(thr.k_star) == 52 / 512
    assert torch.equal(threshold_mask(a, thr), a > 0.5)


def test_sigma_b_frozen_value():
    a = torch.tensor([[0.1, 0.9], [0.9, 0.1]], dtype=torch.float64)
    sb = dtb_threshold(a).sigma_b
    # w1 = w2 = 1/2, centres 103/1024 and 921/1024
    assert float(sb[51]) == pytest.approx(0.25 * (818 / 1024) ** 2, rel=1e-15)


def test_constant_matrix_is_degenerate():
    a = torch.full((3, 4), 0.25)
    thr = dtb_threshold(a)
    assert bool(thr.degenerate) and int(thr.k_bin) == -1 and float(thr.k_star) == 0.0
    assert threshold_mask(a, thr).all()


def test_inactive_entries_ignored():
    a = torch.tensor([[0.1, 0.9, 0.5]], dtype=torch.float64)
    active = torch.tensor([[True, True, False]])
    assert int(dtb_threshold(a, active).histogram.sum()) == 2


def test_threshold_batched_is_per_matrix():
    rng = np.random.default_rng(3)
    mats = np.stack([random_attention(rng, 6, 5) for _ in range(4)]).reshape(2, 2, 6, 5)
    got = dtb_threshold(torch.from_numpy(mats)).k_bin
    for i in range(2):
        for j in range(2):
            assert int(got[i, j]) == dtb_bruteforce(mats[i, j])


def test_threshold_range_check():
    with pytest.raises(ContractError):
        dtb_threshold(torch.tensor([[1.5, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 20), m=st.integers(1, 20), density=st.floats(0.0, 1.0), seed=st.integers(0, 2**31 - 1))
def test_smm_and_attend_match_loops(n, m, density, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((n, 4)), rng.standard_normal((m, 4)), rng.standard_normal((m, 3))
    index = rng.random((n, m)) < density
    index[np.arange(n), rng.integers(0, m, n)] = True
    a = smm_softmax(torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(index), 0.5)
    np.testing.assert_allclose(a.numpy(), masked_softmax_loop(q, k, index, 0.5), atol=1e-12)
    out = attend(a, torch.from_numpy(v), a > 0)
    np.testing.assert_allclose(out.numpy(), attend_loop(a.numpy(), v, a.numpy() > 0), atol=1e-12)


@pytest.mark.parametrize("density", [0.01, 0.5])
def test_sparse_and_dense_kernels_agree(density, monkeypatch):
    rng = np.random.default_rng(0)
    q, k, v = (torch.from_numpy(rng.standard_normal(s)) for s in ((2, 40, 4), (2, 50, 4), (2, 50, 3)))
    index = torch.from_numpy(rng.random((2, 40, 50)) < density)
    index[..., 0] = True
    results = []
    for threshold in (0.0, 1.1):  # force dense, then force sparse
        monkeypatch.setattr(attention, "SPARSE_DENSITY", threshold)
        ledger = FlopLedger()
        with ledger:
            a = smm_softmax(q, k, index, 0.3)
            out = attend(a, v, a > 0)
        results.append((a, out, dict(ledger.counts)))
    assert torch.allclose(results[0][0], results[1][0], atol=1e-12)
    assert torch.allclose(results[0][1], results[1][1], atol=1e-12)
    assert results[0][2] == results[1][2]


def test_flop_counts():
    index = torch.tensor([[True, False, True], [False, True, False]])
    q, k, v = torch.randn(2, 5), torch.randn(3, 5), torch.randn(3, 7)
    ledger = FlopLedger()
    with ledger:
        a = smm_softmax(q, k, index, 1.0, name="s")
        attend(a, v, a > 0, name="o")
    assert dict(ledger.counts) == {"s": 2 * 5 * 3, "o": 2 * 7 * 3}


def test_excluded_get_exact_zero():
    index = torch.tensor([[True, False, False]])
    a = smm_softmax(torch.randn(1, 2), torch.randn(3, 2), index, 1.0)
    assert a.tolist() == [[1.0, 0.0, 0.0]]


def test_empty_row_rejected():
    with pytest.raises(ContractError):
        smm_softmax(torch.randn(2, 2), torch.randn(2, 2), torch.tensor([[True, True], [False, False]]), 1.0)


def test_attend_checks():
    a = torch.tensor([[0.5, 0.5]])
    with pytest.raises(ContractError):
        attend(a, torch.randn(2, 3), torch.tensor([[True, False]]))
    with pytest.raises(DimensionError):
        attend(a, torch.randn(3, 3), a > 0)
    with pytest.raises(DimensionError):
        smm_softmax(torch.randn(1, 2), torch.randn(2, 3), torch.ones(1, 2, dtype=torch.bool), 1.0)


def test_topk_mask_ties_and_bounds():
    a = torch.tensor([[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.4, 0.1]])
    assert topk_mask(a, 2).tolist() == [[True, True, False, False], [False, True, True, False]]
    for bad in (0, 5):
        with pytest.raises(ConfigError):
            topk_mask(a, bad)


def test_select_mask_modes():
    a = torch.softmax(torch.randn(3, 6), -1)
    idx = torch.ones(3, 6, dtype=torch.bool)
    assert select_mask(a, idx, "dense").all()
    assert select_mask(a, idx, "topk").sum(-1).tolist() == [3, 3, 3]
    with pytest.raises(ConfigError):
        select_mask(a, idx, "bogus")


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 12), seed=st.integers(0, 2**31 - 1))
def test_propagate_properties(n, m, seed):
    rng = np.random.default_rng(seed)
    a_prev = torch.from_numpy(random_attention(rng, n, m) * (rng.random((n, m)) < 0.7))
    a_prev[torch.arange(n), torch.from_numpy(rng.integers(0, m, n))] += 0.1
    a_prev = a_prev / a_prev.sum(-1, keepdim=True)
    a_oam = smm_softmax(torch.randn(n, 3, dtype=torch.float64), torch.randn(m, 3, dtype=torch.float64), a_prev > 0, 1.0)
    mask = torch.from_numpy(rng.random((n, m)) < 0.5)
    attn, index = propagate(a_oam, a_prev, mask)
    assert torch.equal(index, attn > 0)
    assert torch.allclose(attn.sum(-1), torch.ones(n, dtype=attn.dtype))
    assert not (index & ~(a_prev > 0)).any()
    assert index.any(-1).all()
    # rows that kept something keep exactly mask & support
    kept = (mask & (a_prev > 0)).any(-1)
    assert torch.equal(index[kept], (mask & (a_prev > 0))[kept])


def test_propagate_survivor_is_row_argmax():
    a_oam = torch.tensor([[0.2, 0.5, 0.3]])
    attn, index = propagate(a_oam, torch.full((1, 3), 1 / 3), torch.zeros(1, 3, dtype=torch.bool))
    assert index.tolist() == [[False, True, False]]
    assert attn.tolist() == [[0.0, 1.0, 0.0]]


def test_propagate_frozen_values():
    a_oam = torch.tensor([[0.5, 0.3, 0.2]], dtype=torch.float64)
    a_prev = torch.tensor([[0.2, 0.4, 0.4]], dtype=torch.float64)
    attn, _ = propagate(a_oam, a_prev, torch.tensor([[True, True, False]]))
    assert torch.allclose(attn, torch.tensor([[0.1 / 0.22, 0.12 / 0.22, 0.0]], dtype=torch.float64))


def test_mask_tape_replays():
    a_oam = torch.tensor([[0.6, 0.4]])
    a_prev = torch.full((1, 2), 0.5)
    tape = MaskTape()
    with tape:
        _, first = propagate(a_oam, a_prev, torch.tensor([[True, False]]))
    with tape:
        _, again = propagate(a_oam, a_prev, torch.tensor([[False, True]]))
    assert torch.equal(first, again)


def test_initial_state():
    s = AttentionState.initial((2,), 3, 4)
    assert s.attn.shape == (2, 3, 4) and s.index.all() and s.layer == 0
    assert torch.allclose(s.attn.sum(-1), torch.ones(2, 3))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), mode=st.sampled_from(["dtb", "topk", "dense"]))
def test_stack_support_shrinks(seed, mode):
    torch.manual_seed(seed)
    blocks = [DFABlock(8, heads=2) for _ in range(3)]
    for b in blocks:
        b.mode = mode
    x, guide = torch.randn(2, 10, 8), torch.randn(2, 14, 8)
    state = None
    prev = 2 * 2 * 10 * 14
    for block in blocks:
        x, state = block(x, guide, state)
        nnz = int(state.index.sum())
        assert nnz <= prev
        prev = nnz
    assert x.shape == (2, 10, 8)


def test_self_attention_stack():
    blocks = [DFABlock(4) for _ in range(2)]
    x = torch.randn(1, 6, 4)
    out, state = run_stack(blocks, x)
    assert out.shape == x.shape and state.attn.shape == (1, 1, 6, 6) and state.layer == 2


def test_block_gradients_flow():
    block = DFABlock(8, heads=2)
    x, g = torch.randn(1, 5, 8, requires_grad=True), torch.randn(1, 7, 8, requires_grad=True)
    out, _ = block(x, g)
    out.sum().backward()
    assert x.grad.abs().sum() > 0 and g.grad.abs().sum() > 0
    assert block.to_k.weight.grad.abs().sum() > 0


def test_block_rejects_bad_heads():
    with pytest.raises(ConfigError):
        DFABlock(6, heads=4)
