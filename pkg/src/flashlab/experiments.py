"""Experiment drivers shared by the CLI and the acceptance tests: the low-precision
error comparison, the forward/backward equivalence suites and the FLOPs bench."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dense import make_rng, rmse, sample_outlier_matrix
from .formats import FP8_E4M3, FP16
from .kernels import (
    SCHEDULES,
    TileConfig,
    flash_bwd,
    flash_forward,
    flops_backward,
    flops_forward,
)
from .lowprec import Fp8AttentionConfig, fp8_flash_fwd, fp16_flash_fwd
from .reference import (
    AttentionInputs,
    baseline_lowprec_attention,
    reference_output,
    std_attention_bwd,
    std_attention_fwd,
)

__all__ = [
    "RMSE_METHODS",
    "trial_inputs",
    "rmse_trial",
    "rmse_experiment",
    "median_rows",
    "CheckCase",
    "check_forward",
    "random_check_cases",
    "gradcheck_instance",
    "finite_difference_grads",
    "bench_rows",
]

RMSE_METHODS = (
    "fp16_baseline",
    "fp16_flash",
    "fp8_baseline",
    "fp8_full",
    "fp8_no_block_quant",
    "fp8_no_incoherent",
)


def trial_inputs(seed: int, seqlen: int, headdim: int) -> AttentionInputs:
    """Q, K, V for one trial: independent outlier matrices on seeds 4t, 4t+1, 4t+2."""
    q, k, v = (sample_outlier_matrix(seqlen, headdim, 4 * seed + c) for c in range(3))
    return AttentionInputs(q, k, v)


def rmse_trial(
    seed: int,
    seqlen: int = 8192,
    headdim: int = 128,
    block: int = 128,
    methods=RMSE_METHODS,
    timings: dict | None = None,
) -> dict:
    """RMSE against the FP64 reference output for each requested method.

    If ``timings`` is given, wall-clock seconds per method (and for the
    reference, under ``"reference"``) are added to it.
    """
    timings = {} if timings is None else timings
    unknown = set(methods) - set(RMSE_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    inp = trial_inputs(seed, seqlen, headdim)
    t0 = time.perf_counter()
    o_ref, _ = reference_output(inp)
    timings["reference"] = timings.get("reference", 0.0) + time.perf_counter() - t0
    tile = TileConfig(block, block)
    hseed = 4 * seed + 3

    def fp8(quant, incoherent):
        cfg = Fp8AttentionConfig(quantization=quant, incoherent=incoherent, seed=hseed, tile=tile)
        return fp8_flash_fwd(inp, cfg).o

    runners = {
        "fp16_baseline": lambda: baseline_lowprec_attention(inp, FP16),
        "fp16_flash": lambda: fp16_flash_fwd(inp, tile).o,
        "fp8_baseline": lambda: baseline_lowprec_attention(inp, FP8_E4M3),
        "fp8_full": lambda: fp8("block", True),
        "fp8_no_block_quant": lambda: fp8("tensor", True),
        "fp8_no_incoherent": lambda: fp8("block", False),
    }
    row = {"seed": seed, "seqlen": seqlen, "headdim": headdim}
    for name in methods:
        t0 = time.perf_counter()
        row[name] = rmse(runners[name](), o_ref)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
    return row


def rmse_experiment(trials: int, seed: int = 0, **kw) -> list[dict]:
    """Trials on seeds ``seed .. seed + trials - 1``; keyword arguments go to :func:`rmse_trial`."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return [rmse_trial(seed + t, **kw) for t in range(trials)]


def median_rows(rows: list[dict], keys) -> dict:
    return {k: float(np.median([r[k] for r in rows])) for k in keys}


@dataclass(frozen=True)
class CheckCase:
    seqlen: int
    headdim: int
    block_rows: int
    block_cols: int
    causal: bool
    seed: int


def random_check_cases(count: int, seed: int, max_seqlen: int = 512) -> list[CheckCase]:
    rng = make_rng(seed)
    cases = []
    for t in range(count):
        cases.append(
            CheckCase(
                seqlen=int(rng.integers(1, max_seqlen + 1)),
                headdim=int(rng.choice([16, 32, 64, 128])),
                block_rows=int(rng.choice([16, 32, 64])),
                block_cols=int(rng.choice([16, 32, 64])),
                causal=bool(rng.integers(2)),
                seed=seed * 100003 + t,
            )
        )
    return cases


def check_forward(case: CheckCase) -> dict:
    """Max |O - O_ref| and |L - L_ref| over all schedules for one case."""
    rng = make_rng(case.seed)
    q, k, v = (rng.standard_normal((case.seqlen, case.headdim)) for _ in range(3))
    inp = AttentionInputs(q, k, v, causal=case.causal)
    ref = std_attention_fwd(inp)
    cfg = TileConfig(case.block_rows, case.block_cols)
    row = {**case.__dict__}
    skipped = 0
    for name in SCHEDULES:
        out = flash_forward(inp, cfg, name)
        finite = np.isfinite(ref.lse)
        row[f"o_err_{name}"] = float(np.max(np.abs(out.o - ref.o)))
        row[f"l_err_{name}"] = float(np.max(np.abs(out.lse[finite] - ref.lse[finite]), initial=0.0))
        skipped = out.trace.skipped
    row["skipped_blocks"] = skipped
    row["max_err"] = max(v for k, v in row.items() if k.startswith(("o_err", "l_err")))
    return row


def finite_difference_grads(inp: AttentionInputs, do: np.ndarray, step: float = 1e-5):
    """Central differences of ``<dO, O(Q, K, V)>`` with respect to every input entry."""

    def loss(q, k, v):
        o = std_attention_fwd(AttentionInputs(q, k, v, inp.alpha, inp.causal)).o
        return float(np.sum(do * o))

    mats = [inp.q.copy(), inp.k.copy(), inp.v.copy()]
    grads = []
    for which in range(3):
        g = np.zeros_like(mats[which])
        for idx in np.ndindex(*g.shape):
            orig = mats[which][idx]
            mats[which][idx] = orig + step
            hi = loss(*mats)
            mats[which][idx] = orig - step
            lo = loss(*mats)
            mats[which][idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def gradcheck_instance(seed: int, seqlen: int, headdim: int, block: int = 4, causal: bool = False, corrupt_lse: bool = False) -> dict:
    """Flash backward against the reference backward and finite differences."""
    rng = make_rng(seed)
    q, k, v, do = (rng.standard_normal((seqlen, headdim)) for _ in range(4))
    inp = AttentionInputs(q, k, v, causal=causal)
    cfg = TileConfig(block, block)
    fwd = flash_forward(inp, cfg)
    lse = fwd.lse + 0.5 if corrupt_lse else fwd.lse
    g = flash_bwd(inp, fwd.o, do, lse, cfg)
    ref = std_attention_bwd(inp, std_attention_fwd(inp).p, do)
    fd = finite_difference_grads(inp, do)
    flash = (g.dq, g.dk, g.dv)
    return {
        "seed": seed,
        "seqlen": seqlen,
        "headdim": headdim,
        "causal": causal,
        "ref_err": max(float(np.max(np.abs(a - b))) for a, b in zip(flash, (ref.dq, ref.dk, ref.dv))),
        "fd_err": max(float(np.max(np.abs(a - b))) for a, b in zip(flash, fd)),
    }


def bench_rows(seqlen: int, headdim: int, heads: int, batch: int, causal: bool, seed: int, block: int = 64) -> list[dict]:
    """FLOPs from the closed-form count plus wall-clock of this emulation on one head."""
    rng = make_rng(seed)
    q, k, v, do = (rng.standard_normal((seqlen, headdim)) for _ in range(4))
    inp = AttentionInputs(q, k, v, causal=causal)
    cfg = TileConfig(block, block)
    warm = AttentionInputs(q[:2], k[:2], v[:2], causal=causal)  # keep JIT loading out of the timings
    wo = flash_forward(warm, cfg)
    flash_bwd(warm, wo.o, do[:2], wo.lse, cfg)
    t0 = time.perf_counter()
    fwd = flash_forward(inp, cfg)
    t1 = time.perf_counter()
    flash_bwd(inp, fwd.o, do, fwd.lse, cfg)
    t2 = time.perf_counter()
    rows = []
    for direction, flops, secs in (
        ("forward", flops_forward(seqlen, headdim, heads, causal, batch), t1 - t0),
        ("backward", flops_backward(seqlen, headdim, heads, causal, batch), t2 - t1),
    ):
        per_head = flops // (heads * batch)
        rows.append(
            {
                "direction": direction,
                "seqlen": seqlen,
                "headdim": headdim,
                "heads": heads,
                "batch": batch,
                "causal": causal,
                "flops": flops,
                "emulated_seconds_one_head": secs,
                "emulation_flops_per_s": per_head / secs if secs > 0 else float("inf"),
            }
        )
    return rows
