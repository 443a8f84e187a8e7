"""Tiled exact attention: online-softmax forward in three consumer schedules and the
blocked backward pass with a dQ accumulation role.

The schedules differ only in statement order (what a warpgroup would have in
flight at each point); in FP64 they perform the same floating-point operations in
the same order, so they agree bit-for-bit with each other. Each call can record a
:class:`KernelTrace` used to audit block skipping and live register buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dense import matmul
from .reference import AttentionGrads, AttentionInputs, causal_mask

__all__ = [
    "TileConfig",
    "SoftmaxState",
    "ForwardOutput",
    "KernelTrace",
    "online_softmax_step",
    "key_blocks",
    "flash_fwd_basic",
    "flash_fwd_2stage",
    "flash_fwd_3stage",
    "SCHEDULES",
    "flash_forward",
    "bwd_preprocess",
    "flash_bwd",
    "flash_mha_fwd",
    "flops_forward",
    "flops_backward",
]


@dataclass(frozen=True)
class TileConfig:
    block_rows: int = 64
    block_cols: int = 64
    stages: int = 2

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("block sizes must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    def t_r(self, n: int) -> int:
        return math.ceil(n / self.block_rows)

    def t_c(self, n: int) -> int:
        return math.ceil(n / self.block_cols)


@dataclass
class SoftmaxState:
    """Running row max ``m`` and row sum ``ell`` of the online softmax."""

    m: np.ndarray
    ell: np.ndarray

    @classmethod
    def initial(cls, rows: int, dtype=np.float64) -> "SoftmaxState":
        return cls(np.full(rows, -np.inf, dtype=dtype), np.zeros(rows, dtype=dtype))

    @property
    def lse(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.ell > 0, self.m + np.log(self.ell), -np.inf)


@dataclass
class KernelTrace:
    visited: list[tuple[int, int]] = field(default_factory=list)
    skipped: int = 0
    fallbacks: int = 0
    # one entry per pipelined mainloop iteration: names of register buffers live
    live: list[tuple[str, ...]] = field(default_factory=list)


@dataclass
class ForwardOutput:
    o: np.ndarray
    lse: np.ndarray
    trace: KernelTrace | None = None


def online_softmax_step(state: SoftmaxState, s_block: np.ndarray):
    """Fold one score block into the running softmax.

    Returns ``(p_tilde, rescale, new_state)`` where ``rescale = exp(m_old - m_new)``
    multiplies the caller's partial output. Rows whose old max is -inf get a
    rescale of exactly 0 and rows still fully masked get ``p_tilde = 0``.
    """
    s_block = np.asarray(s_block)
    if s_block.shape[0] != state.m.shape[0]:
        raise ValueError(f"block has {s_block.shape[0]} rows, state has {state.m.shape[0]}")
    m_new = np.maximum(state.m, s_block.max(axis=1))
    alive = ~np.isneginf(m_new)
    m_sub = np.where(alive, m_new, 0.0).astype(s_block.dtype)
    p = np.exp(s_block - m_sub[:, None])
    started = ~np.isneginf(state.m)
    rescale = np.where(started, np.exp(np.where(started, state.m, 0.0) - m_sub), 0.0)
    rescale = rescale.astype(s_block.dtype)
    ell = rescale * state.ell + p.sum(axis=1, dtype=s_block.dtype)
    return p, rescale, SoftmaxState(m_new.astype(s_block.dtype), ell)


def key_blocks(i: int, cfg: TileConfig, n_q: int, n_k: int, causal: bool) -> list[int]:
    """Key/value block indices query block ``i`` must visit (causal skips the rest)."""
    t_c = cfg.t_c(n_k)
    if not causal:
        return list(range(t_c))
    last_row = min((i + 1) * cfg.block_rows, n_q) - 1
    return [j for j in range(t_c) if j * cfg.block_cols <= last_row]


class _Blocks:
    """Slicing and masked score computation shared by the forward schedules."""

    def __init__(self, inp: AttentionInputs, cfg: TileConfig):
        self.inp = inp
        self.cfg = cfg

    def rows(self, i: int) -> slice:
        br = self.cfg.block_rows
        return slice(i * br, min((i + 1) * br, self.inp.n_q))

    def cols(self, j: int) -> slice:
        bc = self.cfg.block_cols
        return slice(j * bc, min((j + 1) * bc, self.inp.n_k))

    def scores(self, i: int, j: int) -> np.ndarray:
        r, c = self.rows(i), self.cols(j)
        s = self.inp.scale * matmul(self.inp.q[r], self.inp.k[c], transpose_b=True)
        if self.inp.causal and c.stop - 1 > r.start:
            s[causal_mask(s.shape[0], s.shape[1], r.start, c.start)] = -np.inf
        return s

    def pv(self, p: np.ndarray, j: int) -> np.ndarray:
        return matmul(p, self.inp.v[self.cols(j)])


def _epilogue(o: np.ndarray, state: SoftmaxState):
    with np.errstate(divide="ignore", invalid="ignore"):
        o = np.where(state.ell[:, None] > 0, o / state.ell[:, None], 0.0)
    return o, state.lse


def _consumer_basic(blk: _Blocks, i: int, js: list[int], trace: KernelTrace):
    rows = blk.rows(i)
    o = np.zeros((rows.stop - rows.start, blk.inp.v.shape[1]))
    state = SoftmaxState.initial(o.shape[0])
    for j in js:
        trace.visited.append((i, j))
        p, rescale, state = online_softmax_step(state, blk.scores(i, j))
        o = rescale[:, None] * o + blk.pv(p, j)
    return _epilogue(o, state)


def _consumer_2stage(blk: _Blocks, i: int, js: list[int], trace: KernelTrace):
    if len(js) < 2:
        trace.fallbacks += 1
        return _consumer_basic(blk, i, js, trace)
    rows = blk.rows(i)
    o = np.zeros((rows.stop - rows.start, blk.inp.v.shape[1]))
    state = SoftmaxState.initial(o.shape[0])

    trace.visited.append((i, js[0]))
    s_cur = blk.scores(i, js[0])
    p_cur, rescale, state = online_softmax_step(state, s_cur)
    o = rescale[:, None] * o
    for t in range(1, len(js)):
        trace.visited.append((i, js[t]))
        s_next = blk.scores(i, js[t])  # issued, not waited on
        o = o + blk.pv(p_cur, js[t - 1])  # second GEMM of the previous block
        trace.live.append(("S_next", "P_cur"))
        p_next, rescale, state = online_softmax_step(state, s_next)
        o = rescale[:, None] * o  # after the PV GEMM completes
        s_cur, p_cur = s_next, p_next
    o = o + blk.pv(p_cur, js[-1])
    return _epilogue(o, state)


def _consumer_3stage(blk: _Blocks, i: int, js: list[int], trace: KernelTrace):
    if len(js) < 4:
        trace.fallbacks += 1
        return _consumer_basic(blk, i, js, trace)
    rows = blk.rows(i)
    o = np.zeros((rows.stop - rows.start, blk.inp.v.shape[1]))
    state = SoftmaxState.initial(o.shape[0])

    trace.visited.append((i, js[0]))
    s = blk.scores(i, js[0])
    p, scale_o, state = online_softmax_step(state, s)
    trace.visited.append((i, js[1]))
    s = blk.scores(i, js[1])
    for t in range(2, len(js)):
        trace.visited.append((i, js[t]))
        s_next = blk.scores(i, js[t])
        o = scale_o[:, None] * o  # deferred rescale, just before the second GEMM
        o = o + blk.pv(p, js[t - 2])
        p_next, scale_o, state = online_softmax_step(state, s)
        trace.live.append(("S_next", "P_cur", "P_next", "scale_o"))
        s, p = s_next, p_next
    o = scale_o[:, None] * o
    o = o + blk.pv(p, js[-2])
    p, scale_o, state = online_softmax_step(state, s)
    o = scale_o[:, None] * o
    o = o + blk.pv(p, js[-1])
    return _epilogue(o, state)


def _run_forward(consumer, inp: AttentionInputs, cfg: TileConfig) -> ForwardOutput:
    blk = _Blocks(inp, cfg)
    trace = KernelTrace()
    o = np.empty((inp.n_q, inp.v.shape[1]))
    lse = np.empty(inp.n_q)
    t_c = cfg.t_c(inp.n_k)
    for i in range(cfg.t_r(inp.n_q)):
        js = key_blocks(i, cfg, inp.n_q, inp.n_k, inp.causal)
        trace.skipped += t_c - len(js)
        rows = blk.rows(i)
        o[rows], lse[rows] = consumer(blk, i, js, trace)
    return ForwardOutput(o, lse, trace)


def flash_fwd_basic(inp: AttentionInputs, cfg: TileConfig) -> ForwardOutput:
    """Sequential consumer: GEMM, softmax, GEMM per key block."""
    return _run_forward(_consumer_basic, inp, cfg)


def flash_fwd_2stage(inp: AttentionInputs, cfg: TileConfig) -> ForwardOutput:
    """Software-pipelined consumer: the score GEMM of block j is issued before the
    PV GEMM of block j-1, and the softmax of block j sits between their completions.
    Falls back to the basic consumer when fewer than 2 key blocks are visited."""
    return _run_forward(_consumer_2stage, inp, cfg)


def flash_fwd_3stage(inp: AttentionInputs, cfg: TileConfig) -> ForwardOutput:
    """Three-deep pipeline: score GEMM j, softmax j-1 and PV GEMM j-2 in flight
    together, with the output rescale deferred via ``scale_o``. Falls back to the
    basic consumer when fewer than 4 key blocks are visited."""
    return _run_forward(_consumer_3stage, inp, cfg)


SCHEDULES = {
    "basic": flash_fwd_basic,
    "2stage": flash_fwd_2stage,
    "3stage": flash_fwd_3stage,
}


def flash_forward(inp: AttentionInputs, cfg: TileConfig, schedule: str = "basic") -> ForwardOutput:
    try:
        fn = SCHEDULES[schedule]
    except KeyError:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {sorted(SCHEDULES)}") from None
    return fn(inp, cfg)


def bwd_preprocess(do, o) -> np.ndarray:
    """``D = rowsum(dO * O)``."""
    do = np.asarray(do, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if do.shape != o.shape:
        raise ValueError(f"shape mismatch: {do.shape} vs {o.shape}")
    return np.einsum("ij,ij->i", do, o)


def flash_bwd(inp: AttentionInputs, o, do, lse, cfg: TileConfig) -> AttentionGrads:
    """Blocked backward: outer loop over key/value blocks, inner over query blocks.

    P is recomputed from the stored logsumexp. dK_j and dV_j stay local to the
    outer iteration; the per-block dQ contributions are added into dQ in ascending
    key-block order, which stands in for the ordered dQ writer.
    """
    o = np.asarray(o, dtype=np.float64)
    do = np.asarray(do, dtype=np.float64)
    lse = np.asarray(lse, dtype=np.float64)
    if o.shape != (inp.n_q, inp.v.shape[1]) or do.shape != o.shape:
        raise ValueError("O and dO must both be n_q x d_v")
    if lse.shape != (inp.n_q,):
        raise ValueError(f"L has shape {lse.shape}, expected ({inp.n_q},)")
    blk = _Blocks(inp, cfg)
    alpha = inp.scale
    dvec = bwd_preprocess(do, o)
    dq = np.zeros_like(inp.q)
    dk = np.zeros_like(inp.k)
    dv = np.zeros_like(inp.v)
    t_r = cfg.t_r(inp.n_q)
    for j in range(cfg.t_c(inp.n_k)):
        c = blk.cols(j)
        k_j, v_j = inp.k[c], inp.v[c]
        dk_j = np.zeros_like(k_j)
        dv_j = np.zeros_like(v_j)
        for i in range(t_r):
            if j not in key_blocks(i, cfg, inp.n_q, inp.n_k, inp.causal):
                continue
            r = blk.rows(i)
            s = blk.scores(i, j)
            l_i = lse[r]
            with np.errstate(invalid="ignore"):
                p = np.where(np.isneginf(l_i)[:, None], 0.0, np.exp(s - l_i[:, None]))
            dp = matmul(do[r], v_j, transpose_b=True)
            ds = p * (dp - dvec[r][:, None])
            dv_j += matmul(p.T, do[r])
            dk_j += matmul(ds.T, inp.q[r])
            dq[r] += alpha * matmul(ds, k_j)
        dk[c] = alpha * dk_j
        dv[c] = dv_j
    return AttentionGrads(dq, dk, dv)


def flash_mha_fwd(
    q,
    k,
    v,
    cfg: TileConfig,
    kv_map=None,
    causal: bool = False,
    alpha: float | None = None,
    schedule: str = "basic",
):
    """Multi-head forward over ``(heads, N, d)`` queries and ``(kv_heads, N, d)`` keys
    and values; ``kv_map[h]`` names the kv head used by query head ``h``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    heads = q.shape[0]
    if kv_map is None:
        kv_map = np.arange(heads)
    if len(kv_map) != heads:
        raise ValueError(f"kv_map has {len(kv_map)} entries for {heads} heads")
    o = np.empty(q.shape[:2] + (v.shape[2],))
    lse = np.empty(q.shape[:2])
    for h in range(heads):
        g = int(kv_map[h])
        out = flash_forward(AttentionInputs(q[h], k[g], v[g], alpha, causal), cfg, schedule)
        o[h], lse[h] = out.o, out.lse
    return o, lse


def flops_forward(seqlen: int, headdim: int, heads: int, causal: bool = False, batch: int = 1) -> int:
    """``4 * seqlen^2 * headdim * heads`` (per batch element), halved when causal."""
    for name, val in (("seqlen", seqlen), ("headdim", headdim), ("heads", heads), ("batch", batch)):
        if val < 1:
            raise ValueError(f"{name} must be positive, got {val}")
    flops = 4 * seqlen * seqlen * headdim * heads * batch
    return flops // 2 if causal else flops


def flops_backward(seqlen: int, headdim: int, heads: int, causal: bool = False, batch: int = 1) -> int:
    """2.5x the forward count (two forward GEMMs vs five backward GEMMs)."""
    return flops_forward(seqlen, headdim, heads, causal, batch) * 5 // 2
