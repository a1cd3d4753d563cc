"""
Rate-theory objects and trajectory certification.

The contraction factor

    q = max( max_i |1 − γ·α_i|, max_i |1 − γ·L_i| )

and the initial worst-block error D0 define nested level sets
X(s) = {y : ‖y − x̂_A‖_max ≤ q^s·D0}. After c(k) completed communication
cycles every agent's copy should sit in X(c(k)); `check_theorem3` measures that
on recorded snapshots.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike

from async_blockopt.blocknorm import block_max_norm, block_norms
from async_blockopt.engine import DeliverEvent, Event, Trace, UpdateEvent
from async_blockopt.errors import (
    ConvergenceError,
    DimensionError,
    MalformedLogError,
    PreconditionError,
)
from async_blockopt.problem import (
    BlockLayout,
    FloatArray,
    Problem,
    Regularization,
    grad_f_A,
    lipschitz_data,
    project,
)

logger = logging.getLogger(__name__)

DEFAULT_REFERENCE_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000_000


def default_tol_cert(d0: float) -> float:
    return 1e-9 * (1.0 + d0)


# ========== Theory objects ==========

@dataclass(frozen=True, eq=False)
class RateData:
    q: float
    d0: float
    x_hat_A: FloatArray
    gamma: float
    alphas: FloatArray
    lipschitz: FloatArray
    layout: BlockLayout

    def radius(self, s: float) -> float:
        """Radius q^s·D0 of the level set X(s)."""
        return self.q**s * self.d0


def compute_q(gamma: float, alphas: ArrayLike, lipschitz: ArrayLike) -> float:
    a = np.atleast_1d(np.asarray(alphas, dtype=float))
    lips = np.atleast_1d(np.asarray(lipschitz, dtype=float))
    if a.size == 0 or lips.size == 0:
        raise PreconditionError("compute_q needs at least one agent")
    if a.shape != lips.shape:
        raise DimensionError(f"{a.size} alphas against {lips.size} Lipschitz constants")
    return float(max(np.max(np.abs(1.0 - gamma * a)), np.max(np.abs(1.0 - gamma * lips))))


def solve_reference(
    problem: Problem,
    reg: Optional[Regularization],
    tol: float = DEFAULT_REFERENCE_TOL,
    *,
    step: Optional[float] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    x0: Optional[ArrayLike] = None,
) -> FloatArray:
    """
    Minimizer of f_A over the box by synchronous projected gradient.

    Iterates x ← clamp(x − step·∇f_A(x)) with step = 1/L_max by default until
    successive iterates differ by less than `tol` in max-abs. reg=None solves
    the unregularized problem.

    Raises:
        ConvergenceError: iteration cap reached; carries the last residual.
    """
    if tol <= 0:
        raise PreconditionError(f"tol must be > 0, got {tol}")
    if step is None:
        step = 1.0 / lipschitz_data(problem, reg).l_max
    x = project(problem, np.zeros(problem.n) if x0 is None else x0)

    diff = math.inf
    for it in range(1, max_iter + 1):
        x_new = project(problem, x - step * grad_f_A(problem, reg, x))
        diff = float(np.max(np.abs(x_new - x)))
        x = x_new
        if diff < tol:
            logger.debug("Reference solve converged in %d iterations (step=%.6g)", it, step)
            return x
    raise ConvergenceError("Reference solver hit the iteration cap", residual=diff, iterations=max_iter, last=x)


def fixed_point_residual(problem: Problem, reg: Optional[Regularization], x: ArrayLike, step: float) -> float:
    """‖x − clamp(x − step·∇f_A(x))‖_∞."""
    arr = np.asarray(x, dtype=float)
    return float(np.max(np.abs(arr - project(problem, arr - step * grad_f_A(problem, reg, arr)))))


def compute_D0(views: ArrayLike, x_hat_A: ArrayLike, layout: BlockLayout) -> float:
    """max over agents of ‖x^i(0) − x̂_A‖_max; `views` has one row per agent."""
    stack = np.atleast_2d(np.asarray(views, dtype=float))
    return float(block_norms(stack - np.asarray(x_hat_A, dtype=float), layout).max())


def rate_data(
    problem: Problem,
    reg: Regularization,
    initial_views: ArrayLike,
    *,
    x_hat_A: Optional[FloatArray] = None,
    tol: float = DEFAULT_REFERENCE_TOL,
) -> RateData:
    lips = lipschitz_data(problem, reg)
    reg.check_admissible(lips)
    x_hat = solve_reference(problem, reg, tol) if x_hat_A is None else np.asarray(x_hat_A, dtype=float)
    data = RateData(
        q=compute_q(reg.gamma, reg.alphas, lips.block),
        d0=compute_D0(initial_views, x_hat, problem.layout),
        x_hat_A=x_hat,
        gamma=reg.gamma,
        alphas=reg.alphas,
        lipschitz=lips.block,
        layout=problem.layout,
    )
    logger.info("Rate data for %s: q=%.12f D0=%.6g", problem.name, data.q, data.d0)
    return data


# ========== Communication cycles ==========

def _validate_event(event: Event, num_agents: int, previous_tick: int, index: int) -> None:
    if event.tick < previous_tick:
        raise MalformedLogError(f"Event {index} at tick {event.tick} follows tick {previous_tick}")
    if event.tick < 0:
        raise MalformedLogError(f"Event {index} has negative tick {event.tick}")
    if isinstance(event, UpdateEvent):
        if not 0 <= event.agent < num_agents:
            raise MalformedLogError(f"Event {index}: unknown agent {event.agent}")
    elif isinstance(event, DeliverEvent):
        if not (0 <= event.sender < num_agents and 0 <= event.receiver < num_agents):
            raise MalformedLogError(f"Event {index}: unknown agent in {event.sender}->{event.receiver}")
        if event.sender == event.receiver:
            raise MalformedLogError(f"Event {index}: agent {event.sender} messaged itself")
        if not 0 <= event.tau <= event.tick:
            raise MalformedLogError(f"Event {index}: tau={event.tau} outside [0, {event.tick}]")
    else:
        raise MalformedLogError(f"Event {index} has unknown type {type(event).__name__}")


def cycle_completions(events: Sequence[Event], num_agents: int, *, start: int = 0) -> List[int]:
    """
    Ticks at which communication cycles complete.

    A cycle opened at t0 completes at the first tick t where every agent has
    updated at some u_i in [t0, t] and every ordered pair j -> i has seen a
    delivery carrying tau >= u_j (u_j taken as j's first update in the cycle).
    Completion is judged at the end of a tick; the next cycle opens at t + 1.
    """
    if num_agents < 1:
        raise MalformedLogError("Cycle counting needs at least one agent")

    completions: List[int] = []
    pending = num_agents * num_agents  # first updates still missing plus pairs not yet heard
    first_update: List[Optional[int]] = [None] * num_agents
    heard = [[False] * num_agents for _ in range(num_agents)]  # heard[j][i]: i got a fresh block from j
    t0 = start + 1

    previous = start
    for index, event in enumerate(events):
        _validate_event(event, num_agents, previous, index)
        if event.tick > previous:
            if pending == 0:
                completions.append(previous)
                pending = num_agents * num_agents
                first_update = [None] * num_agents
                heard = [[False] * num_agents for _ in range(num_agents)]
                t0 = previous + 1
            previous = event.tick
        if event.tick < t0:
            continue
        if isinstance(event, UpdateEvent):
            if first_update[event.agent] is None:
                first_update[event.agent] = event.tick
                pending -= 1
        else:
            u = first_update[event.sender]
            row = heard[event.sender]
            if u is not None and event.tau >= u and not row[event.receiver]:
                row[event.receiver] = True
                pending -= 1
    if events and pending == 0:
        completions.append(previous)
    return completions


def count_cycles(
    events: Sequence[Event],
    num_agents: int,
    *,
    horizon: Optional[int] = None,
    start: int = 0,
) -> np.ndarray:
    """
    Step function c(k) for k = 0..horizon (defaults to the last event's tick).

    Raises:
        MalformedLogError: unordered ticks, unknown agents, self-messages or
            tau outside [0, tick].
    """
    last = events[-1].tick if events else start
    end = last if horizon is None else horizon
    if end < last:
        raise MalformedLogError(f"Horizon {end} precedes the last event at tick {last}")
    c = np.zeros(end + 1, dtype=np.int64)
    for tick in cycle_completions(events, num_agents, start=start):
        c[tick:] += 1
    return c


# ========== Certificates ==========

@dataclass(frozen=True)
class CertificateRow:
    tick: int
    cycles: int
    bound: float
    observed: float
    passed: bool


@dataclass(frozen=True)
class Certificate:
    rows: Tuple[CertificateRow, ...]
    total_cycles: int
    violations: int
    max_violation: float
    tol_cert: float
    q: float
    d0: float
    notes: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def agent_errors(views: ArrayLike, x_hat: ArrayLike, layout: BlockLayout) -> FloatArray:
    """‖x^i − x̂‖_max per agent for a (..., N, n) stack of views."""
    return block_norms(np.asarray(views, dtype=float) - np.asarray(x_hat, dtype=float), layout).max(axis=-1)


def check_theorem3(trace: Trace, rate: RateData, tol_cert: Optional[float] = None) -> Certificate:
    """
    Compare max_i ‖x^i(k) − x̂_A‖_max with q^c(k)·D0 at every snapshot tick.

    Violations are reported in the certificate, never raised.
    """
    tol = default_tol_cert(rate.d0) if tol_cert is None else tol_cert
    ticks = trace.snapshot_ticks()
    c = count_cycles(trace.events, trace.num_agents, horizon=trace.end_tick, start=trace.start_tick)

    observed = agent_errors(trace.snapshot_views(), rate.x_hat_A, trace.layout).max(axis=-1)
    cycles = c[ticks]
    bounds = rate.q ** cycles.astype(float) * rate.d0
    excess = observed - bounds
    passed = excess <= tol

    rows = tuple(
        CertificateRow(int(k), int(ck), float(b), float(o), bool(ok))
        for k, ck, b, o, ok in zip(ticks, cycles, bounds, observed, passed)
    )
    violations = int(np.count_nonzero(~passed))
    max_violation = float(excess[~passed].max()) if violations else 0.0
    notes: Tuple[str, ...] = ()
    if trace.clamp_count:
        notes = (f"{trace.clamp_count} updates were clamped to the box",)
    if violations:
        logger.warning("Certificate found %d violations (max excess %.3e)", violations, max_violation)
    return Certificate(
        rows=rows,
        total_cycles=int(c[-1]),
        violations=violations,
        max_violation=max_violation,
        tol_cert=tol,
        q=rate.q,
        d0=rate.d0,
        notes=notes,
    )


# ========== Nested level sets ==========

def nested_level(y: ArrayLike, rate: RateData) -> float:
    """
    Largest s >= 0 with y in X(s); math.inf when y equals x̂_A.

    Raises:
        PreconditionError: y lies outside X(0).
    """
    dist = block_max_norm(np.asarray(y, dtype=float) - rate.x_hat_A, rate.layout)
    if dist > rate.d0 + default_tol_cert(rate.d0):
        raise PreconditionError(f"Point at distance {dist:.6g} lies outside X(0) of radius {rate.d0:.6g}")
    if dist == 0.0:
        return math.inf
    if dist >= rate.d0 or rate.q <= 0.0:
        return 0.0
    if rate.q >= 1.0:
        return math.inf
    return float(math.floor(math.log(dist / rate.d0) / math.log(rate.q)))


def sample_level_set(
    problem: Problem,
    rate: RateData,
    s: int,
    rng: np.random.Generator,
    count: int,
) -> FloatArray:
    """
    `count` points of X(s) ∩ X, shape (count, n).

    Each block is drawn uniformly from the box around x̂_{A,i} of half-width
    q^s·D0·w_i clipped to the feasible box, then pulled toward x̂_{A,i} if its
    p_i-norm still exceeds the level radius.
    """
    layout = problem.layout
    radius = rate.radius(s)
    half = np.repeat(radius * np.asarray(layout.weights), layout.sizes)
    lo = np.maximum(problem.lower, rate.x_hat_A - half)
    hi = np.minimum(problem.upper, rate.x_hat_A + half)
    pts = rng.uniform(lo, hi, size=(count, problem.n))

    dev = pts - rate.x_hat_A
    norms = block_norms(dev, layout)  # already divided by w_i
    for i, sl in enumerate(layout.slices()):
        over = norms[:, i] > radius
        if np.any(over):
            dev[over, sl] *= (radius / norms[over, i])[:, None]
    return rate.x_hat_A + dev


def check_assumption4_step(
    problem: Problem,
    reg: Regularization,
    y: ArrayLike,
    s: int,
    rate: RateData,
    tol_cert: Optional[float] = None,
) -> bool:
    """
    Whether the unprojected step θ(y) = y − γ∇f_A(y) lands in X(s+1) blockwise.

    Raises:
        PreconditionError: y is not in X(s).
    """
    tol = default_tol_cert(rate.d0) if tol_cert is None else tol_cert
    arr = np.asarray(y, dtype=float)
    dist = block_max_norm(arr - rate.x_hat_A, problem.layout)
    if dist > rate.radius(s) + tol:
        raise PreconditionError(f"y is at distance {dist:.6g}, outside X({s}) of radius {rate.radius(s):.6g}")

    theta = arr - reg.gamma * grad_f_A(problem, reg, arr)
    return bool(np.all(block_norms(theta - rate.x_hat_A, problem.layout) <= rate.radius(s + 1) + tol))


def regularization_gap(
    problem: Problem,
    reg: Regularization,
    *,
    tol: float = DEFAULT_REFERENCE_TOL,
    x_hat: Optional[FloatArray] = None,
    x_hat_A: Optional[FloatArray] = None,
) -> float:
    """‖x̂_A − x̂‖_max between the regularized and unregularized minimizers."""
    xa = solve_reference(problem, reg, tol) if x_hat_A is None else x_hat_A
    xu = solve_reference(problem, None, tol) if x_hat is None else x_hat
    return block_max_norm(np.asarray(xa) - np.asarray(xu), problem.layout)


def certify_trace_file(path: Union[str, Path], tol_cert: Optional[float] = None) -> Certificate:
    """Re-check a saved trace against the instance recorded in its header."""
    from async_blockopt.schemas import ExperimentConfig
    from async_blockopt.trace_io import read_trace

    trace = read_trace(path)
    raw = trace.metadata.get("config")
    if raw is None:
        raise MalformedLogError(f"Trace {path} carries no experiment config")
    config = ExperimentConfig.model_validate(raw)
    problem, reg = config.build_problem()
    if not np.array_equal(reg.alphas, trace.alphas) or reg.gamma != trace.gamma:
        raise MalformedLogError("Trace header disagrees with the recorded experiment config")
    rate = rate_data(problem, reg, np.tile(trace.x0, (trace.num_agents, 1)))
    return check_theorem3(trace, rate, tol_cert)
