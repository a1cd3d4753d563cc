from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from async_blockopt.errors import (
    DimensionError,
    FeasibilityError,
    LayoutError,
    NonFiniteError,
    RegularizationError,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]

# Norm order used for max-abs blocks; compared with ==, never approximated.
INF = math.inf

LIPSCHITZ_SAFETY = 1.1


def _readonly(values: ArrayLike) -> FloatArray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


# ========== Layout ==========

@dataclass(frozen=True)
class BlockLayout:
    """
    Per-agent block sizes n_i, norm orders p_i and normalization weights w_i.

    Blocks occupy contiguous, disjoint index ranges of the ensemble vector in
    agent order.
    """

    sizes: Tuple[int, ...]
    orders: Tuple[float, ...]
    weights: Tuple[float, ...]
    _offsets: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.sizes)
        orders = tuple(float(p) for p in self.orders)
        weights = tuple(float(w) for w in self.weights)

        if not sizes:
            raise LayoutError("Layout needs at least one block")
        if not (len(sizes) == len(orders) == len(weights)):
            raise LayoutError(
                f"sizes/orders/weights disagree in length: {len(sizes)}/{len(orders)}/{len(weights)}"
            )
        for i, (n_i, p_i, w_i) in enumerate(zip(sizes, orders, weights)):
            if n_i < 1:
                raise LayoutError(f"Block {i} has dimension {n_i}; need >= 1")
            if math.isnan(p_i) or p_i < 1.0:
                raise LayoutError(f"Block {i} has norm order {p_i}; need p in [1, inf]")
            if not math.isfinite(w_i) or w_i < 1.0:
                raise LayoutError(f"Block {i} has weight {w_i}; need finite w >= 1")

        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_offsets", tuple(int(o) for o in np.cumsum((0,) + sizes)))

    @classmethod
    def scalar(cls, orders: Sequence[float], weights: Sequence[float]) -> "BlockLayout":
        """One coordinate per agent."""
        return cls(sizes=(1,) * len(orders), orders=tuple(orders), weights=tuple(weights))

    @classmethod
    def uniform(cls, num_blocks: int, *, size: int = 1, order: float = 2.0, weight: float = 1.0) -> "BlockLayout":
        return cls(sizes=(size,) * num_blocks, orders=(order,) * num_blocks, weights=(weight,) * num_blocks)

    @property
    def num_blocks(self) -> int:
        return len(self.sizes)

    @property
    def n(self) -> int:
        return self._offsets[-1]

    @property
    def offsets(self) -> Tuple[int, ...]:
        return self._offsets

    @property
    def p_min(self) -> float:
        return min(self.orders)

    @property
    def w_min(self) -> float:
        return min(self.weights)

    @property
    def is_scalar(self) -> bool:
        return all(s == 1 for s in self.sizes)

    def block_slice(self, i: int) -> slice:
        if not 0 <= i < self.num_blocks:
            raise IndexError(f"Block index {i} out of range for {self.num_blocks} blocks")
        return slice(self._offsets[i], self._offsets[i + 1])

    def slices(self) -> Tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self._offsets[:-1], self._offsets[1:]))

    def split(self, x: FloatArray) -> list[FloatArray]:
        return [x[..., sl] for sl in self.slices()]


# ========== Objective building blocks ==========

class LocalObjective(Protocol):
    def value(self, x_i: FloatArray) -> float: ...

    def grad(self, x_i: FloatArray) -> FloatArray: ...


class CouplingObjective(Protocol):
    def value(self, x: FloatArray) -> float: ...

    def grad(self, x: FloatArray) -> FloatArray: ...


@dataclass(frozen=True)
class ZeroObjective:
    def value(self, x: FloatArray) -> float:
        return 0.0

    def grad(self, x: FloatArray) -> FloatArray:
        return np.zeros_like(x, dtype=float)


@dataclass(frozen=True)
class Quadratic:
    """½·scale·‖x − center‖²."""

    scale: float
    center: float = 0.0

    def value(self, x: FloatArray) -> float:
        d = x - self.center
        return 0.5 * self.scale * float(d @ d)

    def grad(self, x: FloatArray) -> FloatArray:
        return self.scale * (x - self.center)


@dataclass(frozen=True, eq=False)
class QuadraticCoupling:
    """scale·xᵀGx for a symmetric positive semidefinite G."""

    gram: FloatArray
    scale: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "gram", _readonly(self.gram))

    def value(self, x: FloatArray) -> float:
        return self.scale * float(x @ (self.gram @ x))

    def grad(self, x: FloatArray) -> FloatArray:
        return 2.0 * self.scale * (self.gram @ x)


# ========== Problem ==========

@dataclass(frozen=True, eq=False)
class Problem:
    """
    f(x) = c(x) + Σ_i f_i(x_i) over the box X = Π_i [lower_i, upper_i].

    `block_lipschitz_f` holds analytic Lipschitz constants of ∇_i f (without
    regularization); when absent they are estimated by sampling.
    """

    layout: BlockLayout
    local: Tuple[LocalObjective, ...]
    coupling: CouplingObjective
    lower: FloatArray
    upper: FloatArray
    block_lipschitz_f: Optional[FloatArray] = None
    lipschitz_f: Optional[float] = None
    name: str = "problem"

    def __post_init__(self) -> None:
        local = tuple(self.local)
        if len(local) != self.layout.num_blocks:
            raise LayoutError(f"{len(local)} local objectives for {self.layout.num_blocks} blocks")
        object.__setattr__(self, "local", local)

        lower = _readonly(np.broadcast_to(np.asarray(self.lower, dtype=float), (self.layout.n,)))
        upper = _readonly(np.broadcast_to(np.asarray(self.upper, dtype=float), (self.layout.n,)))
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise FeasibilityError("Box bounds must be finite (compact feasible set)")
        if np.any(lower > upper):
            raise FeasibilityError("Box is empty: some lower bound exceeds its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

        if self.block_lipschitz_f is not None:
            lips = _readonly(self.block_lipschitz_f)
            if lips.shape != (self.layout.num_blocks,) or np.any(lips < 0):
                raise LayoutError("block_lipschitz_f needs one non-negative value per block")
            object.__setattr__(self, "block_lipschitz_f", lips)

    @property
    def num_agents(self) -> int:
        return self.layout.num_blocks

    @property
    def n(self) -> int:
        return self.layout.n


# ========== Regularization ==========

@dataclass(frozen=True)
class LipschitzData:
    block: FloatArray  # L_i of ∇_i f_A
    l_max: float
    m: float  # sqrt(Σ L_i²)
    full: Optional[float]  # L of ∇f


@dataclass(frozen=True, eq=False)
class Regularization:
    """Per-agent Tikhonov weights α_i and the common stepsize γ."""

    alphas: FloatArray
    gamma: float

    def __post_init__(self) -> None:
        alphas = _readonly(np.atleast_1d(np.asarray(self.alphas, dtype=float)))
        if alphas.ndim != 1 or alphas.size == 0:
            raise RegularizationError("alphas must be a non-empty vector")
        if not np.all(np.isfinite(alphas)) or np.any(alphas <= 0):
            raise RegularizationError(f"Every alpha_i must be > 0, got {alphas.tolist()}")
        if not math.isfinite(self.gamma) or self.gamma <= 0:
            raise RegularizationError(f"Stepsize gamma must be > 0, got {self.gamma}")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_agents(self) -> int:
        return int(self.alphas.size)

    @property
    def strong_convexity_modulus(self) -> float:
        return float(self.alphas.min())

    @property
    def norm(self) -> float:
        """Spectral norm of A = diag(α_i I_{n_i})."""
        return float(self.alphas.max())

    def diagonal(self, layout: BlockLayout) -> FloatArray:
        if layout.num_blocks != self.num_agents:
            raise DimensionError(f"{self.num_agents} alphas for {layout.num_blocks} blocks")
        return np.repeat(self.alphas, layout.sizes)

    def check_admissible(self, lipschitz: LipschitzData) -> None:
        """Raise unless γ ∈ (0, 2/L_max) and every α_i < L_max."""
        if self.gamma >= 2.0 / lipschitz.l_max:
            raise RegularizationError(
                f"gamma={self.gamma:.6g} must be below 2/L_max={2.0 / lipschitz.l_max:.6g}"
            )
        if np.any(self.alphas >= lipschitz.l_max):
            raise RegularizationError(f"Every alpha_i must be below L_max={lipschitz.l_max:.6g}")


# ========== Evaluation ==========

def _ensemble(problem: Problem, x: ArrayLike) -> FloatArray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (problem.n,):
        raise DimensionError(f"Expected an ensemble vector of length {problem.n}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("Ensemble vector contains non-finite values")
    return arr


def _check_reg(problem: Problem, reg: Regularization) -> None:
    if reg.num_agents != problem.num_agents:
        raise DimensionError(f"{reg.num_agents} alphas for {problem.num_agents} agents")


def eval_f(problem: Problem, x: ArrayLike) -> float:
    """c(x) + Σ_i f_i(x_i)."""
    arr = _ensemble(problem, x)
    total = problem.coupling.value(arr)
    for f_i, sl in zip(problem.local, problem.layout.slices()):
        total += f_i.value(arr[sl])
    return float(total)


def eval_f_A(problem: Problem, reg: Regularization, x: ArrayLike) -> float:
    """f(x) + ½ Σ_i α_i ‖x_i‖²."""
    _check_reg(problem, reg)
    arr = _ensemble(problem, x)
    return eval_f(problem, arr) + 0.5 * float(reg.diagonal(problem.layout) @ (arr * arr))


def grad_f_A_block(
    problem: Problem,
    reg: Regularization,
    x: ArrayLike,
    i: int,
    *,
    validate: bool = True,
) -> FloatArray:
    """
    ∇_i c(x) + ∇f_i(x_i) + α_i x_i.

    `validate=False` skips the index, shape and input checks for callers that
    already hold a finite ensemble vector of the right length.
    """
    if validate:
        if not 0 <= i < problem.num_agents:
            raise IndexError(f"Agent index {i} out of range for {problem.num_agents} agents")
        _check_reg(problem, reg)
        arr = _ensemble(problem, x)
    else:
        arr = x  # type: ignore[assignment]
    sl = problem.layout.block_slice(i)
    g = problem.coupling.grad(arr)[sl] + problem.local[i].grad(arr[sl]) + reg.alphas[i] * arr[sl]
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"Gradient of block {i} is not finite")
    return g


def grad_f_A(problem: Problem, reg: Optional[Regularization], x: ArrayLike) -> FloatArray:
    """Full gradient; reg=None gives ∇f."""
    arr = _ensemble(problem, x)
    g = np.array(problem.coupling.grad(arr), dtype=float)
    for f_i, sl in zip(problem.local, problem.layout.slices()):
        g[sl] += f_i.grad(arr[sl])
    if reg is not None:
        _check_reg(problem, reg)
        g += reg.diagonal(problem.layout) * arr
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("Gradient is not finite")
    return g


def project(problem: Problem, x: ArrayLike) -> FloatArray:
    return np.clip(np.asarray(x, dtype=float), problem.lower, problem.upper)


def contains(problem: Problem, x: ArrayLike) -> bool:
    arr = np.asarray(x, dtype=float)
    return bool(arr.shape == (problem.n,) and np.all(arr >= problem.lower) and np.all(arr <= problem.upper))


def sample_feasible(problem: Problem, rng: np.random.Generator, count: int) -> FloatArray:
    """`count` points drawn uniformly from the box, shape (count, n)."""
    return rng.uniform(problem.lower, problem.upper, size=(count, problem.n))


# ========== Lipschitz data ==========

def estimate_block_lipschitz(
    problem: Problem,
    reg: Regularization,
    i: int,
    samples: int,
    *,
    seed: int = 0,
) -> float:
    """
    Upper estimate of the Lipschitz constant L_i of ∇_i f_A on X.

    Analytic values on the problem take precedence. Otherwise the largest
    sampled difference quotient over `samples` random pairs is inflated by
    the safety factor 1.1. Every other pair only moves block i, which pins
    down the block-diagonal curvature.
    """
    if samples <= 0:
        raise ValueError("samples must be a positive integer")
    _check_reg(problem, reg)
    if problem.block_lipschitz_f is not None:
        return float(problem.block_lipschitz_f[i] + reg.alphas[i])

    rng = np.random.default_rng(seed)
    sl = problem.layout.block_slice(i)
    xs = sample_feasible(problem, rng, samples)
    ys = sample_feasible(problem, rng, samples)
    ys[1::2] = xs[1::2]
    ys[1::2, sl] = rng.uniform(problem.lower[sl], problem.upper[sl], size=(len(ys[1::2]), sl.stop - sl.start))

    best = 0.0
    for x, y in zip(xs, ys):
        dist = float(np.linalg.norm(x - y))
        if dist == 0.0:
            continue
        diff = grad_f_A_block(problem, reg, x, i) - grad_f_A_block(problem, reg, y, i)
        best = max(best, float(np.linalg.norm(diff)) / dist)
    return LIPSCHITZ_SAFETY * best


def _estimate_full_lipschitz(problem: Problem, samples: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    xs = sample_feasible(problem, rng, samples)
    ys = sample_feasible(problem, rng, samples)
    best = 0.0
    for x, y in zip(xs, ys):
        dist = float(np.linalg.norm(x - y))
        if dist > 0.0:
            best = max(best, float(np.linalg.norm(grad_f_A(problem, None, x) - grad_f_A(problem, None, y))) / dist)
    return LIPSCHITZ_SAFETY * best


def lipschitz_data(
    problem: Problem,
    reg: Optional[Regularization],
    *,
    samples: int = 200,
    seed: int = 0,
) -> LipschitzData:
    """L_i, L_max, M and L for f_A (or for f when reg is None)."""
    if reg is None:
        if problem.block_lipschitz_f is not None:
            block = np.array(problem.block_lipschitz_f, dtype=float)
        else:
            # α-free estimate: sample with a negligible regularizer and strip it back off
            tiny = Regularization(alphas=np.full(problem.num_agents, 1e-300), gamma=1.0)
            block = np.array(
                [estimate_block_lipschitz(problem, tiny, i, samples, seed=seed) for i in range(problem.num_agents)]
            )
    else:
        block = np.array([estimate_block_lipschitz(problem, reg, i, samples, seed=seed) for i in range(problem.num_agents)])

    full = problem.lipschitz_f if problem.lipschitz_f is not None else _estimate_full_lipschitz(problem, samples, seed)
    data = LipschitzData(block=_readonly(block), l_max=float(block.max()), m=float(np.sqrt(np.sum(block**2))), full=full)
    logger.debug("Lipschitz data for %s: L_max=%.6g M=%.6g", problem.name, data.l_max, data.m)
    return data
