"""Low-precision tiled forward passes: the FP8 e4m3 path with block quantization,
incoherent preprocessing and the P-tile / V-tile layout permutation, plus the
fp16 tiled forward used as the fp16 flash row of the error comparison.

Both GEMMs accumulate in fp32 with products that are exact in fp32; softmax math
is fp32; the output is written as fp16 and returned in a float64 carrier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import DHTransform, is_power_of_two, random_dh_transform
from .formats import (
    FP8_E4M3,
    FP16,
    FP32,
    QuantizedTensor,
    fma_accumulate,
    quantize_per_block,
    quantize_per_tensor,
    round_array,
)
from .kernels import ForwardOutput, KernelTrace, TileConfig, key_blocks
from .reference import AttentionInputs, causal_mask

__all__ = [
    "Fp8AttentionConfig",
    "LAYOUT_PATTERN",
    "layout_permutation",
    "permute_accumulator",
    "vtile_transpose",
    "preprocess_incoherent",
    "fp8_flash_fwd",
    "fp16_flash_fwd",
]

# within each group of 8 accumulator columns: d0 d1 d4 d5 d2 d3 d6 d7
LAYOUT_PATTERN = np.array([0, 1, 4, 5, 2, 3, 6, 7])


@dataclass(frozen=True)
class Fp8AttentionConfig:
    quantization: str = "block"  # "block" or "tensor"
    incoherent: bool = True
    seed: int = 0
    tile: TileConfig = field(default_factory=lambda: TileConfig(128, 128))
    permuted_layout: bool = True

    def __post_init__(self):
        if self.quantization not in ("block", "tensor"):
            raise ValueError(f"quantization must be 'block' or 'tensor', got {self.quantization!r}")


def layout_permutation(width: int) -> np.ndarray:
    """Column order applied to a P-tile accumulator of ``width`` columns (multiple of 16)."""
    if width < 1 or width % 16:
        raise ValueError(f"accumulator width must be a positive multiple of 16, got {width}")
    return (np.arange(0, width, 8)[:, None] + LAYOUT_PATTERN[None, :]).ravel()


def _partial_permutation(width: int) -> np.ndarray:
    # ragged tails keep their trailing (width % 16) columns in place
    full = width - width % 16
    head = layout_permutation(full) if full else np.empty(0, dtype=int)
    return np.concatenate([head, np.arange(full, width)])


def permute_accumulator(block) -> np.ndarray:
    """Reorder the columns of ``block`` by :func:`layout_permutation`. The pattern is
    its own inverse, so applying this twice gives back ``block``."""
    block = np.asarray(block)
    if block.ndim != 2:
        raise ValueError("block must be 2-D")
    return block[:, layout_permutation(block.shape[1])]


def vtile_transpose(vblock, permuted: bool = False) -> np.ndarray:
    """Transpose a ``B_c x d`` V tile to ``d x B_c``. With ``permuted`` the output
    columns (rows of V) follow the accumulator permutation, so that
    ``permute_accumulator(P) @ vtile_transpose(V, True).T == P @ V``."""
    vt = np.asarray(vblock).T
    if permuted:
        vt = vt[:, layout_permutation(vt.shape[1])]
    return np.ascontiguousarray(vt)


def preprocess_incoherent(q, k, seed: int, transform: DHTransform | None = None):
    """Rotate the rows of Q and K by one shared random sign-flip Hadamard matrix."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d = q.shape[1]
    if not is_power_of_two(d):
        raise ValueError(f"incoherent processing needs a power-of-two head dim, got {d}")
    if k.shape[1] != d:
        raise ValueError("q and k head dims differ")
    m = transform if transform is not None else random_dh_transform(d, seed)
    return m.apply(q), m.apply(k)


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


class _Fp32Softmax:
    """Online softmax state held in fp32."""

    def __init__(self, rows: int):
        self.m = np.full(rows, -np.inf, dtype=np.float32)
        self.ell = np.zeros(rows, dtype=np.float32)

    def step(self, s: np.ndarray):
        m_new = np.maximum(self.m, s.max(axis=1))
        alive = ~np.isneginf(m_new)
        m_sub = np.where(alive, m_new, np.float32(0))
        p = np.exp(s - m_sub[:, None])
        started = ~np.isneginf(self.m)
        with np.errstate(invalid="ignore"):
            rescale = np.where(started, np.exp(self.m - m_sub), np.float32(0)).astype(np.float32)
        self.m = m_new
        return p, rescale

    def accumulate(self, rescale, p):
        self.ell = rescale * self.ell + p.sum(axis=1, dtype=np.float32)

    def finish(self, o: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(self.ell[:, None] > 0, o / self.ell[:, None], np.float32(0))
            lse = np.where(
                self.ell > 0,
                self.m.astype(np.float64) + np.log(self.ell.astype(np.float64)),
                -np.inf,
            )
        return round_array(out, FP16), lse


def _mask_block(s, inp: AttentionInputs, r0: int, c0: int):
    if inp.causal and c0 + s.shape[1] - 1 > r0:
        s[causal_mask(s.shape[0], s.shape[1], r0, c0)] = -np.inf


def _quantize(x, block_rows: int, mode: str) -> QuantizedTensor:
    if mode == "block":
        return quantize_per_block(x, block_rows, FP8_E4M3)
    return quantize_per_tensor(x, FP8_E4M3)


def fp8_flash_fwd(inp: AttentionInputs, cfg: Fp8AttentionConfig | None = None) -> ForwardOutput:
    """FP8 e4m3 tiled forward.

    Q is quantized in ``B_r``-row blocks and K, V in ``B_c``-row blocks (or per
    tensor). Each S tile is an fp32-accumulated code GEMM descaled by
    ``s_q * s_k * alpha`` before the online softmax. P~ is requantized to e4m3 per
    ``B_r x B_c`` tile (amax/448) in block mode; in tensor mode it uses the static
    scale 1/448 since its entries are bounded by 1. The PV tile product is
    descaled by ``s_p * s_v`` and added into the fp32 output accumulator.
    """
    cfg = cfg or Fp8AttentionConfig()
    tile = cfg.tile
    q, k = inp.q, inp.k
    if cfg.incoherent:
        q, k = preprocess_incoherent(q, k, cfg.seed)
    qq = _quantize(q, tile.block_rows, cfg.quantization)
    kq = _quantize(k, tile.block_cols, cfg.quantization)
    vq = _quantize(inp.v, tile.block_cols, cfg.quantization)
    sq, sk, sv = qq.row_scales(), kq.row_scales(), vq.row_scales()
    q_codes = _f32(qq.codes)
    kt_codes = _f32(kq.codes.T)
    v_codes = _f32(vq.codes)
    fp8_max = FP8_E4M3.max_finite
    dv = inp.v.shape[1]

    trace = KernelTrace()
    o_out = np.empty((inp.n_q, dv))
    lse = np.empty(inp.n_q)
    br, bc = tile.block_rows, tile.block_cols
    t_c = tile.t_c(inp.n_k)
    for i in range(tile.t_r(inp.n_q)):
        r0, r1 = i * br, min((i + 1) * br, inp.n_q)
        js = key_blocks(i, tile, inp.n_q, inp.n_k, inp.causal)
        trace.skipped += t_c - len(js)
        sm = _Fp32Softmax(r1 - r0)
        o = np.zeros((r1 - r0, dv), dtype=np.float32)
        for j in js:
            trace.visited.append((i, j))
            c0, c1 = j * bc, min((j + 1) * bc, inp.n_k)
            acc = fma_accumulate(np.zeros((r1 - r0, c1 - c0), np.float32), q_codes[r0:r1], kt_codes[:, c0:c1])
            # Q rows r0:r1 and K rows c0:c1 each share one scale
            s = acc * np.float32(round_array(sq[r0] * sk[c0] * inp.scale, FP32))
            _mask_block(s, inp, r0, c0)
            p, rescale = sm.step(s)
            sm.accumulate(rescale, p)
            if cfg.quantization == "block":
                amax = float(p.max())
                sp = amax / fp8_max if amax > 0 else 1.0
            else:
                sp = 1.0 / fp8_max
            p_codes = _f32(round_array(p / np.float32(sp), FP8_E4M3))
            v_tile = v_codes[c0:c1]
            if cfg.permuted_layout:
                perm = _partial_permutation(c1 - c0)
                p_codes = np.ascontiguousarray(p_codes[:, perm])
                v_tile = np.ascontiguousarray(v_tile[perm])
            pv = fma_accumulate(np.zeros((r1 - r0, dv), np.float32), p_codes, v_tile)
            pv_scale = np.float32(round_array(sp * sv[c0], FP32))
            o = rescale[:, None] * o + pv * pv_scale
        o_out[r0:r1], lse[r0:r1] = sm.finish(o)
    return ForwardOutput(o_out, lse, trace)


def fp16_flash_fwd(inp: AttentionInputs, tile: TileConfig | None = None) -> ForwardOutput:
    """fp16 tiled forward: fp16 inputs, fp32 S and softmax, P~ rounded to fp16 and
    accumulated straight onto the rescaled fp32 output tile."""
    tile = tile or TileConfig(128, 128)
    q = _f32(round_array(inp.q, FP16))
    kt = _f32(round_array(inp.k, FP16).T)
    v = _f32(round_array(inp.v, FP16))
    alpha = np.float32(inp.scale)
    dv = v.shape[1]

    trace = KernelTrace()
    o_out = np.empty((inp.n_q, dv))
    lse = np.empty(inp.n_q)
    br, bc = tile.block_rows, tile.block_cols
    t_c = tile.t_c(inp.n_k)
    for i in range(tile.t_r(inp.n_q)):
        r0, r1 = i * br, min((i + 1) * br, inp.n_q)
        js = key_blocks(i, tile, inp.n_q, inp.n_k, inp.causal)
        trace.skipped += t_c - len(js)
        sm = _Fp32Softmax(r1 - r0)
        o = np.zeros((r1 - r0, dv), dtype=np.float32)
        for j in js:
            trace.visited.append((i, j))
            c0, c1 = j * bc, min((j + 1) * bc, inp.n_k)
            s = fma_accumulate(np.zeros((r1 - r0, c1 - c0), np.float32), q[r0:r1], kt[:, c0:c1])
            s *= alpha
            _mask_block(s, inp, r0, c0)
            p, rescale = sm.step(s)
            sm.accumulate(rescale, p)
            p16 = _f32(round_array(p, FP16))
            o = np.ascontiguousarray(rescale[:, None] * o)
            fma_accumulate(o, p16, v[c0:c1])
        o_out[r0:r1], lse[r0:r1] = sm.finish(o)
    return ForwardOutput(o_out, lse, trace)
