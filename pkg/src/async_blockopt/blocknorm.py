from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from numpy.typing import ArrayLike

from async_blockopt.errors import DimensionError, LayoutError, NonFiniteError
from async_blockopt.problem import INF, BlockLayout, FloatArray

logger = logging.getLogger(__name__)

SpectralMethod = Literal["svd", "power"]
SampleDomain = Literal["block", "euclidean"]


@dataclass(frozen=True, eq=False)
class BlockVectorView:
    """An ensemble vector read through a block layout."""

    data: FloatArray
    layout: BlockLayout

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=float)
        if arr.shape != (self.layout.n,):
            raise DimensionError(f"Vector of shape {arr.shape} does not match layout dimension {self.layout.n}")
        object.__setattr__(self, "data", arr)

    def block(self, i: int) -> FloatArray:
        return self.data[self.layout.block_slice(i)]

    def norms(self) -> FloatArray:
        return block_norms(self.data, self.layout)


def _p_norm(blocks: FloatArray, p: float) -> FloatArray:
    """p-norm along the last axis, max-abs scaled so large p cannot overflow."""
    mags = np.abs(blocks)
    peak = mags.max(axis=-1)
    if p == INF:
        return peak
    safe = np.where(peak > 0.0, peak, 1.0)
    ratio = mags / safe[..., None]
    return np.where(peak > 0.0, safe * np.sum(ratio**p, axis=-1) ** (1.0 / p), 0.0)


def block_norms(x: ArrayLike, layout: BlockLayout) -> FloatArray:
    """
    Weighted block norms ‖x_i‖_{p_i} / w_i over the last axis.

    Accepts any leading shape: an (n,) vector gives (N,), a (T, N, n) stack of
    snapshot views gives (T, N, N).
    """
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (layout.n,):
        raise DimensionError(f"Last axis has length {arr.shape[-1:]}, layout needs {layout.n}")
    if np.isnan(arr).any():
        raise NonFiniteError("NaN in block vector")

    out = np.empty(arr.shape[:-1] + (layout.num_blocks,), dtype=float)
    for i, (sl, p, w) in enumerate(zip(layout.slices(), layout.orders, layout.weights)):
        out[..., i] = _p_norm(arr[..., sl], p) / w
    return out


def block_max_norm(x: Union[BlockVectorView, ArrayLike], layout: Optional[BlockLayout] = None) -> float:
    """max_i ‖x_i‖_{p_i} / w_i."""
    if isinstance(x, BlockVectorView):
        data, layout = x.data, x.layout
    else:
        if layout is None:
            raise LayoutError("A layout is required for a raw vector")
        data = x
    if layout.num_blocks == 0:
        raise LayoutError("Empty layout")
    return float(block_norms(data, layout).max(axis=-1))


def spectral_norm(
    B: ArrayLike,
    *,
    method: SpectralMethod = "svd",
    tol: float = 1e-12,
    max_iter: int = 10_000,
    seed: int = 0,
) -> float:
    """
    Largest singular value of B.

    "svd" defers to LAPACK. "power" runs power iteration on BᵀB with a
    residual stopping test ‖Gv − λv‖ ≤ tol·λ.
    """
    mat = np.asarray(B, dtype=float)
    if mat.ndim != 2:
        raise DimensionError(f"Expected a matrix, got shape {mat.shape}")
    if mat.size == 0:
        return 0.0
    if method == "svd":
        return float(np.linalg.norm(mat, ord=2))
    if method != "power":
        raise ValueError(f"Unknown spectral norm method: {method!r}")

    gram = mat.T @ mat
    rng = np.random.default_rng(seed)
    v = rng.normal(size=gram.shape[0])
    v /= np.linalg.norm(v)

    lam = 0.0
    for _ in range(max_iter):
        y = gram @ v
        y_norm = float(np.linalg.norm(y))
        if y_norm == 0.0:
            # v sits in the null space; for a zero matrix every restart does too
            if not np.any(gram):
                return 0.0
            v = rng.normal(size=gram.shape[0])
            v /= np.linalg.norm(v)
            continue
        lam = float(v @ y)
        v = y / y_norm
        if np.linalg.norm(gram @ v - lam * v) <= tol * max(lam, 1e-300):
            break
    else:
        logger.warning("Power iteration hit the cap of %d iterations", max_iter)
    return math.sqrt(max(lam, 0.0))


def lemma1_bound(B: ArrayLike, layout: BlockLayout, *, method: SpectralMethod = "svd") -> float:
    """
    Upper bound on the induced block-maximum norm of B.

    n^(1/p_min − 1/2)·‖B‖₂/w_min when p_min < 2, otherwise ‖B‖₂/w_min.
    """
    mat = np.asarray(B, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"Matrix must be square, got shape {mat.shape}")
    if mat.shape[0] != layout.n:
        raise DimensionError(f"Matrix size {mat.shape[0]} does not match layout dimension {layout.n}")

    base = spectral_norm(mat, method=method) / layout.w_min
    if layout.p_min < 2.0:
        return layout.n ** (1.0 / layout.p_min - 0.5) * base
    return base


def unit_block_ball_sample(layout: BlockLayout, rng: np.random.Generator, count: int) -> FloatArray:
    """`count` random vectors rescaled to block-max norm exactly 1."""
    xs = rng.normal(size=(count, layout.n))
    return xs / block_norms(xs, layout).max(axis=-1, keepdims=True)


def brute_force_induced_norm(
    B: ArrayLike,
    layout: BlockLayout,
    trials: int,
    *,
    seed: int = 0,
    domain: SampleDomain = "block",
) -> float:
    """
    Sampled lower bound of sup ‖Bx‖_max.

    domain="block" takes x on the unit block-max sphere (the induced norm);
    domain="euclidean" takes x on the Euclidean unit sphere.
    """
    if trials <= 0:
        raise ValueError("trials must be a positive integer")
    mat = np.asarray(B, dtype=float)
    if mat.shape != (layout.n, layout.n):
        raise DimensionError(f"Matrix shape {mat.shape} does not match layout dimension {layout.n}")

    rng = np.random.default_rng(seed)
    if domain == "block":
        xs = unit_block_ball_sample(layout, rng, trials)
    elif domain == "euclidean":
        xs = rng.normal(size=(trials, layout.n))
        xs /= np.linalg.norm(xs, axis=-1, keepdims=True)
    else:
        raise ValueError(f"Unknown sampling domain: {domain!r}")

    return float(block_norms(xs @ mat.T, layout).max())
