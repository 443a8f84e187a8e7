"""Ground-truth attention: dense FP64 forward/backward and the materializing
low-precision "standard attention" baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dense import matmul
from .formats import (
    FP8_E4M3,
    FP16,
    FP32,
    FloatFormat,
    fma_accumulate,
    quantize_per_tensor,
    round_array,
)

__all__ = [
    "AttentionInputs",
    "AttentionGrads",
    "ReferenceForward",
    "causal_mask",
    "dsoftmax",
    "std_attention_fwd",
    "std_attention_bwd",
    "reference_output",
    "baseline_lowprec_attention",
    "gqa_expand",
]


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    alpha: float | None = None
    causal: bool = False

    def __post_init__(self):
        q, k, v = (np.asarray(x, dtype=np.float64) for x in (self.q, self.k, self.v))
        for name, x in (("q", q), ("k", k), ("v", v)):
            if x.ndim != 2:
                raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
        if q.shape[0] == 0 or k.shape[0] == 0 or q.shape[1] == 0:
            raise ValueError("degenerate attention inputs (N or d is zero)")
        if q.shape[1] != k.shape[1]:
            raise ValueError(f"q and k head dims differ: {q.shape[1]} vs {k.shape[1]}")
        if k.shape[0] != v.shape[0]:
            raise ValueError(f"k and v lengths differ: {k.shape[0]} vs {v.shape[0]}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def scale(self) -> float:
        return self.alpha if self.alpha is not None else 1.0 / np.sqrt(self.q.shape[1])

    @property
    def n_q(self) -> int:
        return self.q.shape[0]

    @property
    def n_k(self) -> int:
        return self.k.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


class ReferenceForward(NamedTuple):
    o: np.ndarray
    s: np.ndarray
    p: np.ndarray
    lse: np.ndarray


def causal_mask(n_q: int, n_k: int, row0: int = 0, col0: int = 0) -> np.ndarray:
    """True where column > row, i.e. where the score is masked to -inf."""
    rows = np.arange(row0, row0 + n_q)[:, None]
    cols = np.arange(col0, col0 + n_k)[None, :]
    return cols > rows


def _softmax_rows(s: np.ndarray):
    """Row softmax with rowmax subtraction. Fully masked rows give P=0, L=-inf."""
    m = s.max(axis=1)
    dead = np.isneginf(m)
    m_safe = np.where(dead, 0.0, m)
    e = np.exp(s - m_safe[:, None])
    ell = e.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(dead[:, None], 0.0, e / ell[:, None])
        lse = np.where(dead, -np.inf, m_safe + np.log(ell))
    return p, lse


def _scores(inp: AttentionInputs, rows: slice | None = None) -> np.ndarray:
    q = inp.q if rows is None else inp.q[rows]
    s = inp.scale * matmul(q, inp.k, transpose_b=True)
    if inp.causal:
        row0 = 0 if rows is None else rows.start
        s[causal_mask(s.shape[0], s.shape[1], row0)] = -np.inf
    return s


def std_attention_fwd(inp: AttentionInputs) -> ReferenceForward:
    s = _scores(inp)
    p, lse = _softmax_rows(s)
    return ReferenceForward(matmul(p, inp.v), s, p, lse)


def reference_output(inp: AttentionInputs, row_chunk: int = 1024):
    """``(O, L)`` of :func:`std_attention_fwd` without keeping all of S and P alive."""
    o = np.empty((inp.n_q, inp.v.shape[1]))
    lse = np.empty(inp.n_q)
    for start in range(0, inp.n_q, row_chunk):
        rows = slice(start, min(start + row_chunk, inp.n_q))
        p, lse[rows] = _softmax_rows(_scores(inp, rows))
        o[rows] = matmul(p, inp.v)
    return o, lse


def dsoftmax(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Row-wise ``(diag(p) - p p^T) dp``."""
    return p * (dp - np.sum(p * dp, axis=1, keepdims=True))


def std_attention_bwd(inp: AttentionInputs, p, do) -> AttentionGrads:
    p = np.asarray(p, dtype=np.float64)
    do = np.asarray(do, dtype=np.float64)
    if p.shape != (inp.n_q, inp.n_k):
        raise ValueError(f"P has shape {p.shape}, expected {(inp.n_q, inp.n_k)}")
    if do.shape != (inp.n_q, inp.v.shape[1]):
        raise ValueError(f"dO has shape {do.shape}, expected {(inp.n_q, inp.v.shape[1])}")
    dv = matmul(p.T, do)
    dp = matmul(do, inp.v, transpose_b=True)
    ds = dsoftmax(p, dp)
    dq = inp.scale * matmul(ds, inp.k)
    dk = inp.scale * matmul(ds.T, inp.q)
    return AttentionGrads(dq, dk, dv)


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _fp32_gemm(a, b) -> np.ndarray:
    a = _as_f32(a)
    b = _as_f32(b)
    return fma_accumulate(np.zeros((a.shape[0], b.shape[1]), np.float32), a, b)


def _fp16_softmax(s16: np.ndarray) -> np.ndarray:
    """Softmax with every elementwise intermediate held at fp16; row sums accumulate in fp32."""
    m = s16.max(axis=1, keepdims=True)
    dead = np.isneginf(m)
    m = np.where(dead, 0.0, m)
    e = round_array(np.exp(round_array(s16 - m, FP16)), FP16)
    ell = round_array(np.sum(_as_f32(e), axis=1, keepdims=True, dtype=np.float32), FP16)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(dead, 0.0, round_array(e / ell, FP16))
    return p


def baseline_lowprec_attention(
    inp: AttentionInputs, fmt: FloatFormat, row_chunk: int = 1024
) -> np.ndarray:
    """Standard (S and P materialized) attention in fp16 or fp8-e4m3.

    fp16: Q, K, V rounded to fp16; both GEMMs accumulate in fp32 and write fp16;
    the scaling, exponent, row-sum and normalization steps are each rounded to fp16.

    fp8: Q, K, V quantized per tensor to e4m3; S is descaled in fp32 and stored in
    fp16, softmax as above in fp16; P is requantized per tensor to e4m3 for the
    second GEMM. Output O is written in fp16 for both formats.
    """
    if fmt.name not in ("fp16", "fp8e4m3"):
        raise ValueError(f"baseline supports fp16 or fp8e4m3, got {fmt.name}")
    fp8 = fmt.name == "fp8e4m3"
    if fp8:
        qq, kq, vq = (quantize_per_tensor(x, FP8_E4M3) for x in (inp.q, inp.k, inp.v))
        q, k, v = qq.codes, kq.codes, vq.codes
        qk_scale = round_array(qq.scales[0] * kq.scales[0], FP32)
    else:
        q, k, v = (round_array(x, FP16) for x in (inp.q, inp.k, inp.v))
    kt = np.ascontiguousarray(k.T)

    # P is kept at fp16 for the whole tensor: the fp8 path needs its global amax.
    p16 = np.empty((inp.n_q, inp.n_k), dtype=np.float16)
    for start in range(0, inp.n_q, row_chunk):
        rows = slice(start, min(start + row_chunk, inp.n_q))
        acc = _fp32_gemm(q[rows], kt)
        if fp8:
            acc = acc * np.float32(qk_scale)
        s = round_array(acc, FP16)
        s = round_array(s * inp.scale, FP16)
        if inp.causal:
            s[causal_mask(s.shape[0], s.shape[1], start)] = -np.inf
        p16[rows] = _fp16_softmax(s)

    if fp8:
        p_scale = float(np.max(p16)) / FP8_E4M3.max_finite or 1.0
        pv_scale = np.float32(round_array(p_scale * vq.scales[0], FP32))
    o = np.empty((inp.n_q, inp.v.shape[1]))
    for start in range(0, inp.n_q, row_chunk):
        rows = slice(start, min(start + row_chunk, inp.n_q))
        p = p16[rows].astype(np.float64)
        if fp8:
            acc = _fp32_gemm(round_array(p / p_scale, FP8_E4M3), v) * pv_scale
        else:
            acc = _fp32_gemm(p, v)
        o[rows] = round_array(acc, FP16)
    return o


def gqa_expand(heads: int, kv_heads: int) -> np.ndarray:
    """Query-head -> kv-head index map for MHA/GQA/MQA; never copies K or V."""
    if heads < 1 or kv_heads < 1 or heads % kv_heads:
        raise ValueError(f"heads={heads} is not a positive multiple of kv_heads={kv_heads}")
    return np.arange(heads) // (heads // kv_heads)
