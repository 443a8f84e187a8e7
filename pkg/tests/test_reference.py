import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flashlab.formats import FP8_E4M3, FP16
from flashlab.reference import (
    AttentionInputs,
    baseline_lowprec_attention,
    causal_mask,
    dsoftmax,
    gqa_expand,
    reference_output,
    std_attention_bwd,
    std_attention_fwd,
)


def naive_attention(q, k, v, alpha, causal=False):
    """Row-by-row softmax written with Python sums, no shared code paths."""
    n_q, n_k = q.shape[0], k.shape[0]
    o = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        cols = [j for j in range(n_k) if not causal or j <= i]
        if not cols:
            continue
        s = [alpha * sum(q[i, t] * k[j, t] for t in range(q.shape[1])) for j in cols]
        m = max(s)
        w = [np.exp(x - m) for x in s]
        z = sum(w)
        for jj, j in enumerate(cols):
            o[i] += w[jj] / z * v[j]
    return o


def inputs(rng, n=12, d=8, causal=False, n_k=None):
    n_k = n if n_k is None else n_k
    return AttentionInputs(rng.standard_normal((n, d)), rng.standard_normal((n_k, d)), rng.standard_normal((n_k, d)), causal=causal)


@pytest.mark.parametrize("causal", [False, True])
def test_forward_matches_naive(rng, causal):
    inp = inputs(rng, 9, 4, causal)
    ref = std_attention_fwd(inp)
    np.testing.assert_allclose(ref.o, naive_attention(inp.q, inp.k, inp.v, inp.scale, causal), atol=1e-13)


def test_single_key_returns_v(rng):
    inp = inputs(rng, 1, 8)
    ref = std_attention_fwd(inp)
    assert np.array_equal(ref.p, [[1.0]])
    np.testing.assert_allclose(ref.o, inp.v, atol=0)


def test_identical_keys_average_values(rng):
    k = np.tile(rng.standard_normal((1, 8)), (5, 1))
    v = rng.standard_normal((5, 3))
    ref = std_attention_fwd(AttentionInputs(rng.standard_normal((4, 8)), k, v))
    np.testing.assert_allclose(ref.p, 0.2, atol=1e-15)
    np.testing.assert_allclose(ref.o, np.tile(v.mean(axis=0), (4, 1)), atol=1e-14)


@given(seed=st.integers(0, 2**31), n=st.integers(1, 20), d=st.integers(1, 9), causal=st.booleans())
def test_probabilities_are_normalized(seed, n, d, causal):
    inp = inputs(np.random.default_rng(seed), n, d, causal)
    ref = std_attention_fwd(inp)
    np.testing.assert_allclose(ref.p.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(ref.p >= 0)
    if causal:
        assert not np.any(ref.p[causal_mask(n, n)])
    np.testing.assert_allclose(np.exp(ref.s - ref.lse[:, None]), ref.p, atol=1e-15)


def test_shift_invariance_of_scores(rng):
    # adding c to every key shifts each score row by the constant alpha * q_i . c
    inp = inputs(rng, 6, 4)
    c = rng.standard_normal(4)
    a = std_attention_fwd(inp).o
    b = std_attention_fwd(AttentionInputs(inp.q, inp.k + c, inp.v)).o
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_causal_mask_geometry():
    assert np.array_equal(causal_mask(3, 3), np.triu(np.ones((3, 3), bool), 1))
    assert causal_mask(2, 2, row0=0, col0=5).all()
    assert not causal_mask(2, 3, row0=10, col0=0).any()


def test_reference_output_chunks_match(rng):
    inp = inputs(rng, 50, 8, causal=True)
    full = std_attention_fwd(inp)
    o, lse = reference_output(inp, row_chunk=7)
    assert np.array_equal(o, full.o) and np.array_equal(lse, full.lse)


def test_input_validation(rng):
    with pytest.raises(ValueError):
        AttentionInputs(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        AttentionInputs(np.ones((0, 3)), np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        AttentionInputs(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))
    with pytest.raises(ValueError):
        AttentionInputs(np.ones(3), np.ones((2, 3)), np.ones((2, 3)))
    inp = inputs(rng, 4, 2)
    with pytest.raises(ValueError):
        std_attention_bwd(inp, np.ones((3, 4)), np.ones((4, 2)))


def test_dsoftmax_matches_jacobian(rng):
    p = rng.dirichlet(np.ones(5), size=3)
    dp = rng.standard_normal((3, 5))
    for r in range(3):
        jac = np.diag(p[r]) - np.outer(p[r], p[r])
        np.testing.assert_allclose(dsoftmax(p, dp)[r], jac @ dp[r], atol=1e-15)


def _fd(f, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = f()
        x[idx] = old - step
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


@pytest.mark.parametrize("causal", [False, True])
def test_backward_matches_finite_differences(rng, causal):
    q, k, v = (rng.standard_normal((5, 3)) for _ in range(3))
    do = rng.standard_normal((5, 3))

    def loss():
        return float(np.sum(do * std_attention_fwd(AttentionInputs(q, k, v, causal=causal)).o))

    inp = AttentionInputs(q, k, v, causal=causal)
    g = std_attention_bwd(inp, std_attention_fwd(inp).p, do)
    for mine, x in ((g.dq, q), (g.dk, k), (g.dv, v)):
        np.testing.assert_allclose(mine, _fd(loss, x), atol=1e-8)


def test_baselines_exact_on_representable_inputs():
    # every value and every intermediate is exact in fp16/e4m3; uniform attention
    q = np.zeros((4, 4))
    k = np.ones((4, 4))
    v = np.array([[1.0, 2.0, 0.5, -1.0]] * 4)
    inp = AttentionInputs(q, k, v)
    for fmt in (FP16, FP8_E4M3):
        np.testing.assert_array_equal(baseline_lowprec_attention(inp, fmt), v)


def test_baseline_errors_are_bounded(rng):
    inp = inputs(rng, 64, 16)
    ref = std_attention_fwd(inp).o
    e16 = np.abs(baseline_lowprec_attention(inp, FP16) - ref).max()
    e8 = np.abs(baseline_lowprec_attention(inp, FP8_E4M3) - ref).max()
    assert e16 < 5e-3 and e8 < 0.2 and e16 < e8
    with pytest.raises(ValueError):
        from flashlab.formats import BF16

        baseline_lowprec_attention(inp, BF16)


def test_baseline_causal_rows(rng):
    inp = inputs(rng, 16, 8, causal=True)
    out = baseline_lowprec_attention(inp, FP16)
    np.testing.assert_allclose(out[0], np.asarray(inp.v[0]), atol=2e-3)


def test_gqa_expand():
    assert np.array_equal(gqa_expand(4, 4), [0, 1, 2, 3])
    assert np.array_equal(gqa_expand(4, 2), [0, 0, 1, 1])
    assert np.array_equal(gqa_expand(4, 1), [0, 0, 0, 0])
    with pytest.raises(ValueError):
        gqa_expand(6, 4)
