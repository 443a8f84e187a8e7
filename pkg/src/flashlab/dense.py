"""Dense FP64 building blocks: fixed-order GEMM, row reductions, seeded sampling
and the normalized fast Walsh-Hadamard transform.

Matrices are plain ``numpy`` float64 arrays. Every reduction here runs in a fixed
left-to-right order so results are bit-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "make_rng",
    "matmul",
    "row_max",
    "row_sum",
    "fwht",
    "hadamard",
    "DHTransform",
    "random_dh_transform",
    "sample_outlier_matrix",
    "rmse",
    "is_power_of_two",
]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; the only RNG used in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@numba.njit(cache=True)
def _gemm_f64(a, b, out):
    # i-k-j order: each out[i, j] is accumulated over k ascending, starting at 0.
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        acc = out[i]
        for p in range(k):
            x = a[i, p]
            brow = b[p]
            for j in range(n):
                acc[j] = acc[j] + x * brow[j]


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b, transpose_b: bool = False) -> np.ndarray:
    """``a @ b`` (or ``a @ b.T``) with exact FP64 products and k-ascending sums.

    No reassociation is performed, so the result for identical inputs is
    identical bit-for-bit on every run.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    if a.size and b.size:
        _gemm_f64(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def row_max(a) -> np.ndarray:
    a = _as_matrix(a, "a")
    if a.size == 0:
        raise ValueError("row_max of an empty matrix")
    return a.max(axis=1)


@numba.njit(cache=True)
def _row_sum_kernel(a, out):
    m, n = a.shape
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += a[i, j]
        out[i] = s


def row_sum(a) -> np.ndarray:
    """Left-to-right row sums (numpy's own ``sum`` is pairwise)."""
    a = _as_matrix(a, "a")
    if a.size == 0:
        raise ValueError("row_sum of an empty matrix")
    out = np.empty(a.shape[0])
    _row_sum_kernel(np.ascontiguousarray(a), out)
    return out


def fwht(v) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform along the last axis.

    Returns ``H v / sqrt(d)`` with ``H`` the Sylvester-ordered Hadamard matrix,
    so the transform is its own inverse.
    """
    x = np.array(v, dtype=np.float64, copy=True)
    d = x.shape[-1]
    if not is_power_of_two(d):
        raise ValueError(f"fwht length must be a power of two, got {d}")
    lead = x.shape[:-1]
    h = 1
    while h < d:
        x = x.reshape(*lead, d // (2 * h), 2, h)
        lo = x[..., 0, :]
        hi = x[..., 1, :]
        x = np.stack((lo + hi, lo - hi), axis=-2).reshape(*lead, d)
        h *= 2
    return x / np.sqrt(d)


def hadamard(d: int) -> np.ndarray:
    """Unnormalized Sylvester Hadamard matrix (entries +-1)."""
    if not is_power_of_two(d):
        raise ValueError(f"Hadamard order must be a power of two, got {d}")
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h


@dataclass(frozen=True)
class DHTransform:
    """Orthogonal ``M = diag(signs) H / sqrt(d)`` acting on row vectors (``x M``)."""

    signs: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=np.float64)
        if s.ndim != 1 or not is_power_of_two(s.size):
            raise ValueError("signs must be a 1-D vector of power-of-two length")
        if not np.all(np.abs(s) == 1.0):
            raise ValueError("signs must be +-1")
        object.__setattr__(self, "signs", s)

    @property
    def dim(self) -> int:
        return self.signs.size

    @property
    def normalization(self) -> float:
        return 1.0 / np.sqrt(self.dim)

    def apply(self, x) -> np.ndarray:
        """Rows of ``x`` times ``M`` in O(d log d) per row."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"last axis {x.shape[-1]} != transform dim {self.dim}")
        return fwht(x * self.signs)

    def inverse(self, x) -> np.ndarray:
        """Rows of ``x`` times ``M^T``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"last axis {x.shape[-1]} != transform dim {self.dim}")
        return fwht(x) * self.signs

    def matrix(self) -> np.ndarray:
        return self.signs[:, None] * hadamard(self.dim) / np.sqrt(self.dim)


def random_dh_transform(dim: int, seed: int) -> DHTransform:
    if not is_power_of_two(dim):
        raise ValueError(f"transform dim must be a power of two, got {dim}")
    signs = make_rng(seed).choice(np.array([-1.0, 1.0]), size=dim)
    return DHTransform(signs)


def sample_outlier_matrix(
    rows: int,
    cols: int,
    seed: int,
    outlier_prob: float = 0.001,
    outlier_std: float = 10.0,
) -> np.ndarray:
    """Entries ``N(0,1) + N(0, outlier_std**2) * Bernoulli(outlier_prob)``.

    Draw order from the Philox stream: base normals, outlier normals, then the
    Bernoulli uniforms, each as one row-major ``rows x cols`` block.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"dims must be positive, got {rows}x{cols}")
    rng = make_rng(seed)
    base = rng.standard_normal((rows, cols))
    spikes = rng.standard_normal((rows, cols)) * outlier_std
    mask = rng.random((rows, cols)) < outlier_prob
    base += np.where(mask, spikes, 0.0)
    return base


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.mean(diff * diff)))
