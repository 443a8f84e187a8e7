import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashlab.kernels import (
    SCHEDULES,
    SoftmaxState,
    TileConfig,
    bwd_preprocess,
    flash_bwd,
    flash_forward,
    flash_mha_fwd,
    flops_backward,
    flops_forward,
    key_blocks,
    online_softmax_step,
)
from flashlab.reference import AttentionInputs, gqa_expand, std_attention_bwd, std_attention_fwd


def make(seed, n, d, causal=False, n_k=None):
    rng = np.random.default_rng(seed)
    n_k = n if n_k is None else n_k
    return AttentionInputs(rng.standard_normal((n, d)), rng.standard_normal((n_k, d)), rng.standard_normal((n_k, d)), causal=causal)


def test_online_softmax_two_blocks_match_direct():
    s = np.array([[1.0, 2.0, 3.0, 0.5]])
    state = SoftmaxState.initial(1)
    p1, r1, state = online_softmax_step(state, s[:, :2])
    assert r1[0] == 0.0  # nothing accumulated yet
    p2, r2, state = online_softmax_step(state, s[:, 2:])
    assert r2[0] == pytest.approx(np.exp(2.0 - 3.0), abs=0)
    assert state.m[0] == 3.0
    assert state.ell[0] == pytest.approx(np.exp(s - 3.0).sum(), rel=1e-15)
    assert state.lse[0] == pytest.approx(np.log(np.exp(s).sum()), rel=1e-15)


def test_online_softmax_masked_rows():
    state = SoftmaxState.initial(2)
    s = np.array([[-np.inf, -np.inf], [0.0, -np.inf]])
    p, r, state = online_softmax_step(state, s)
    assert np.array_equal(p, [[0.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(r, [0.0, 0.0])
    assert np.isneginf(state.lse[0]) and state.lse[1] == 0.0
    with pytest.raises(ValueError):
        online_softmax_step(state, np.zeros((3, 2)))


@given(seed=st.integers(0, 2**31), cols=st.integers(1, 30), split=st.integers(1, 8))
def test_online_softmax_any_partition(seed, cols, split):
    s = np.random.default_rng(seed).standard_normal((3, cols)) * 5
    state = SoftmaxState.initial(3)
    for start in range(0, cols, split):
        _, _, state = online_softmax_step(state, s[:, start : start + split])
    ref = np.log(np.exp(s).sum(axis=1))
    np.testing.assert_allclose(state.lse, ref, rtol=1e-14)
    assert np.array_equal(state.m, s.max(axis=1))


def test_key_blocks_causal():
    cfg = TileConfig(4, 4)
    assert key_blocks(0, cfg, 16, 16, False) == [0, 1, 2, 3]
    assert key_blocks(0, cfg, 16, 16, True) == [0]
    assert key_blocks(2, cfg, 16, 16, True) == [0, 1, 2]
    assert key_blocks(1, TileConfig(4, 8), 16, 16, True) == [0]


@pytest.mark.parametrize("schedule", sorted(SCHEDULES))
@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("n,br,bc", [(1, 16, 16), (37, 8, 16), (64, 16, 16), (70, 32, 8)])
def test_schedules_match_reference(schedule, causal, n, br, bc):
    inp = make(n, n, 16, causal)
    ref = std_attention_fwd(inp)
    out = flash_forward(inp, TileConfig(br, bc), schedule)
    assert np.max(np.abs(out.o - ref.o)) <= 1e-12
    assert np.max(np.abs(out.lse - ref.lse)) <= 1e-12


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 90), bc=st.sampled_from([4, 8, 16]), causal=st.booleans())
def test_schedules_bit_identical(seed, n, bc, causal):
    inp = make(seed, n, 8, causal)
    cfg = TileConfig(8, bc)
    outs = [flash_forward(inp, cfg, s) for s in ("basic", "2stage", "3stage")]
    for o in outs[1:]:
        assert np.array_equal(o.o, outs[0].o) and np.array_equal(o.lse, outs[0].lse)


def test_rectangular_and_extreme_inputs():
    inp = make(3, 20, 8, n_k=45)
    ref = std_attention_fwd(inp)
    out = flash_forward(inp, TileConfig(8, 16), "3stage")
    np.testing.assert_allclose(out.o, ref.o, atol=1e-12)
    big = AttentionInputs(inp.q * 300, inp.k, inp.v)
    out = flash_forward(big, TileConfig(8, 16), "2stage")
    assert np.all(np.isfinite(out.o))
    np.testing.assert_allclose(out.o, std_attention_fwd(big).o, atol=1e-12)


def test_fallbacks_and_live_buffers():
    inp = make(0, 64, 8)
    two = flash_forward(inp, TileConfig(16, 64), "2stage").trace
    assert two.fallbacks == 4 and two.live == []
    three = flash_forward(inp, TileConfig(16, 32), "3stage").trace
    assert three.fallbacks == 4
    t2 = flash_forward(inp, TileConfig(16, 16), "2stage").trace
    assert t2.fallbacks == 0
    assert t2.live == [("S_next", "P_cur")] * (4 * 3)
    t3 = flash_forward(inp, TileConfig(16, 16), "3stage").trace
    assert t3.live == [("S_next", "P_cur", "P_next", "scale_o")] * (4 * 2)


def test_causal_skips_blocks():
    inp = make(1, 64, 8, causal=True)
    tr = flash_forward(inp, TileConfig(16, 16)).trace
    assert tr.skipped == 6
    assert all(j * 16 <= i * 16 + 15 for i, j in tr.visited)
    assert len(tr.visited) == 10


def test_flash_backward_matches_reference():
    for causal in (False, True):
        inp = make(5, 29, 8, causal)
        do = np.random.default_rng(9).standard_normal((29, 8))
        fwd = flash_forward(inp, TileConfig(8, 4))
        g = flash_bwd(inp, fwd.o, do, fwd.lse, TileConfig(8, 4))
        ref = std_attention_bwd(inp, std_attention_fwd(inp).p, do)
        for a, b in ((g.dq, ref.dq), (g.dk, ref.dk), (g.dv, ref.dv)):
            assert np.max(np.abs(a - b)) <= 1e-11


def test_backward_detects_wrong_lse():
    inp = make(6, 12, 4)
    do = np.ones((12, 4))
    fwd = flash_forward(inp, TileConfig(4, 4))
    good = flash_bwd(inp, fwd.o, do, fwd.lse, TileConfig(4, 4))
    bad = flash_bwd(inp, fwd.o, do, fwd.lse + 0.5, TileConfig(4, 4))
    assert np.max(np.abs(good.dv - bad.dv)) > 1e-3
    with pytest.raises(ValueError):
        flash_bwd(inp, fwd.o, do, fwd.lse[:3], TileConfig(4, 4))


def test_bwd_preprocess():
    assert np.array_equal(bwd_preprocess([[1.0, 2.0]], [[3.0, 4.0]]), [11.0])
    with pytest.raises(ValueError):
        bwd_preprocess(np.ones((2, 2)), np.ones((2, 3)))


@pytest.mark.parametrize("heads,kv_heads", [(4, 4), (4, 2), (4, 1)])
def test_gqa_equals_duplication(heads, kv_heads):
    rng = np.random.default_rng(heads * 10 + kv_heads)
    q = rng.standard_normal((heads, 24, 8))
    k, v = (rng.standard_normal((kv_heads, 24, 8)) for _ in range(2))
    kv_map = gqa_expand(heads, kv_heads)
    o, lse = flash_mha_fwd(q, k, v, TileConfig(8, 8), kv_map, causal=True)
    o2, lse2 = flash_mha_fwd(q, k[kv_map], v[kv_map], TileConfig(8, 8), causal=True)
    assert np.array_equal(o, o2) and np.array_equal(lse, lse2)


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(0, 4)
    with pytest.raises(ValueError):
        flash_forward(make(0, 4, 4), TileConfig(4, 4), "4stage")
    assert TileConfig(16, 16).t_r(33) == 3


def test_flops_formula():
    assert flops_forward(512, 64, 32) == 2_147_483_648
    assert flops_forward(512, 64, 32, causal=True) == 2_147_483_648 // 2
    assert flops_backward(512, 64, 32) == 5_368_709_120
    assert flops_forward(2048, 128, 16, batch=8) == 8 * 4 * 2048**2 * 128 * 16
    with pytest.raises(ValueError):
        flops_forward(0, 64, 1)


@given(seed=st.integers(0, 2**31), cols=st.integers(1, 40))
def test_running_max_monotone_and_sum_positive(seed, cols):
    s = np.random.default_rng(seed).standard_normal((4, cols)) * 3
    s[0, : cols // 2] = -np.inf  # a row that starts masked
    state = SoftmaxState.initial(4)
    prev = state.m.copy()
    for start in range(0, cols, 4):
        _, _, state = online_softmax_step(state, s[:, start : start + 4])
        assert np.all(state.m >= prev)
        started = ~np.isneginf(state.m)
        assert np.all(state.ell[started] > 0)
        prev = state.m.copy()


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 80), causal=st.booleans())
def test_block_size_invariance(seed, n, causal):
    inp = make(seed, n, 8, causal)
    outs = [flash_forward(inp, TileConfig(br, bc), "2stage").o for br, bc in ((16, 16), (32, 8), (7, 13))]
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) <= 1e-12


def test_single_key_block_is_basic_bit_for_bit():
    inp = make(2, 40, 8, n_k=16)
    base = flash_forward(inp, TileConfig(16, 16), "basic").o
    for s in ("2stage", "3stage"):
        assert np.array_equal(flash_forward(inp, TileConfig(16, 16), s).o, base)


def test_bwd_preprocess_examples(rng):
    assert np.array_equal(bwd_preprocess(np.ones((2, 3)), np.ones((2, 3))), [3.0, 3.0])
    assert not np.any(bwd_preprocess(np.zeros((2, 3)), rng.standard_normal((2, 3))))
    do, o = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    oracle = [sum(do[i, t] * o[i, t] for t in range(4)) for i in range(5)]
    np.testing.assert_allclose(bwd_preprocess(do, o), oracle, atol=1e-14)


def test_zero_upstream_gradient():
    inp = make(4, 20, 8, causal=True)
    fwd = flash_forward(inp, TileConfig(8, 8))
    g = flash_bwd(inp, fwd.o, np.zeros((20, 8)), fwd.lse, TileConfig(8, 8))
    assert not (np.any(g.dq) or np.any(g.dk) or np.any(g.dv))
