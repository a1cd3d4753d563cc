"""
Multi-commodity flow routing instance.

Eight flows each use a fixed route over a nine-edge network. Flow i earns
utility 100·log(1 + x_i) and all flows share a congestion cost
(1/20)·‖Cx‖², where C is the edge-by-flow connection matrix.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike

from async_blockopt.engine import ScheduleConfig, World, init_world
from async_blockopt.errors import ConfigError, NonFiniteError, RoutingError
from async_blockopt.problem import (
    INF,
    BlockLayout,
    FloatArray,
    Problem,
    QuadraticCoupling,
    Regularization,
)

logger = logging.getLogger(__name__)

AChoice = Literal["A1", "A2", "A3"]

NUM_EDGES = 9

# agent id -> edges traversed, both 1-based
PAPER_ROUTES: Dict[int, Tuple[int, ...]] = {
    1: (1, 3, 6),
    2: (4, 7, 8),
    3: (2, 4, 7, 5),
    4: (3, 4, 7),
    5: (1, 3, 6, 7, 5),
    6: (2, 4, 9),
    7: (5, 8, 9, 6),
    8: (7, 4),
}

PAPER_WEIGHTS: Tuple[float, ...] = (12.0, 8.0, 6.0, 7.0, 6.0, 10.0, 9.0, 10.0)
PAPER_ORDERS: Tuple[float, ...] = (INF, 20.0, 3.0, 90.0, 6.0, 12.0, 2.0, 9.0)

PAPER_ALPHAS: Dict[str, Tuple[float, ...]] = {
    "A1": (3e-4, 1e-4, 9e-4, 2e-4, 1e-3, 1e-3, 5e-4, 4e-4),
    "A2": (0.01, 0.01, 0.003, 0.005, 0.002, 0.01, 0.005, 0.002),
    "A3": (0.08, 0.1, 0.1, 0.09, 0.009, 0.1, 0.08, 0.04),
}

# Published agent-1 errors, for report comparison only.
PUBLISHED_REGULARIZED_ERRORS: Dict[str, float] = {"A1": 2.2575e-8, "A2": 2.1837e-8, "A3": 7.9827e-10}
PUBLISHED_UNREGULARIZED_ERRORS: Dict[str, float] = {"A1": 2.9558e-4, "A2": 8.4922e-4, "A3": 0.0848}

SCALE_LOCAL = 100.0
SCALE_COUPLING = 1.0 / 20.0
DEFAULT_UPPER = 10.0
DEFAULT_P = 0.1


@dataclass(frozen=True)
class LogUtility:
    """−scale·log(1 + x), summed over the block."""

    scale: float = SCALE_LOCAL

    def value(self, x: FloatArray) -> float:
        if np.any(x <= -1.0):
            raise NonFiniteError("log utility is undefined for x <= -1")
        return -self.scale * float(np.sum(np.log1p(x)))

    def grad(self, x: FloatArray) -> FloatArray:
        if np.any(x <= -1.0):
            raise NonFiniteError("log utility is undefined for x <= -1")
        return -self.scale / (1.0 + x)


RouteTable = Union[Mapping[int, Sequence[int]], Sequence[Sequence[int]]]


def _normalize_routes(routes: RouteTable) -> Dict[int, Tuple[int, ...]]:
    if isinstance(routes, Mapping):
        table = {int(a): tuple(int(e) for e in r) for a, r in routes.items()}
        expected = set(range(1, len(table) + 1))
        if set(table) != expected:
            raise RoutingError(f"Agent ids must be 1..{len(table)}, got {sorted(table)}")
        return table
    return {a: tuple(int(e) for e in r) for a, r in enumerate(routes, start=1)}


def build_connection_matrix(routes: RouteTable, num_edges: int = NUM_EDGES) -> FloatArray:
    """
    C[k, i] = 1 iff flow i traverses edge k (edges and agents 1-based in `routes`).

    Raises:
        RoutingError: an edge index outside [1, num_edges].
    """
    table = _normalize_routes(routes)
    C = np.zeros((num_edges, len(table)), dtype=float)
    for agent, route in table.items():
        for edge in route:
            if not 1 <= edge <= num_edges:
                raise RoutingError(f"Agent {agent} uses edge {edge}, outside [1, {num_edges}]")
            C[edge - 1, agent - 1] = 1.0
    return C


def load_routes(path: Union[str, Path]) -> Dict[int, Tuple[int, ...]]:
    """
    Read a route table from CSV with columns `agent,edges`, edges separated by
    spaces (for example `1,1 3 6`).
    """
    table: Dict[int, Tuple[int, ...]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"agent", "edges"} <= set(reader.fieldnames):
            raise RoutingError(f"{path}: expected columns 'agent,edges'")
        for row in reader:
            try:
                agent = int(row["agent"])
                edges = tuple(int(e) for e in (row["edges"] or "").split())
            except ValueError as e:
                raise RoutingError(f"{path}: bad row {row}") from e
            if agent in table:
                raise RoutingError(f"{path}: agent {agent} listed twice")
            table[agent] = edges
    _normalize_routes(table)
    logger.debug("Loaded %d routes from %s", len(table), path)
    return table


def paper_layout() -> BlockLayout:
    return BlockLayout.scalar(PAPER_ORDERS, PAPER_WEIGHTS)


def build_problem(
    C: ArrayLike,
    scale_local: float = SCALE_LOCAL,
    scale_coupling: float = SCALE_COUPLING,
    *,
    upper: float = DEFAULT_UPPER,
    layout: Optional[BlockLayout] = None,
) -> Problem:
    """
    Routing problem on the box [0, upper]^N with analytic Lipschitz data.

    ∇_i f has Lipschitz constant scale_local + 2·scale_coupling·λ_max(CᵀC)
    on x >= 0, since f_i'' = scale_local/(1 + x_i)² <= scale_local there.
    """
    conn = np.asarray(C, dtype=float)
    if conn.ndim != 2:
        raise RoutingError(f"Connection matrix must be 2-D, got shape {conn.shape}")
    if not np.all((conn == 0.0) | (conn == 1.0)):
        raise RoutingError("Connection matrix must be binary")
    num_agents = conn.shape[1]
    if layout is None:
        layout = paper_layout() if num_agents == len(PAPER_WEIGHTS) else BlockLayout.uniform(num_agents)

    gram = conn.T @ conn
    lam_max = float(np.linalg.eigvalsh(gram)[-1]) if num_agents else 0.0
    lip = scale_local + 2.0 * scale_coupling * lam_max
    return Problem(
        layout=layout,
        local=tuple(LogUtility(scale_local) for _ in range(num_agents)),
        coupling=QuadraticCoupling(gram=gram, scale=scale_coupling),
        lower=np.zeros(num_agents),
        upper=np.full(num_agents, float(upper)),
        block_lipschitz_f=np.full(num_agents, lip),
        lipschitz_f=lip,
        name="routing",
    )


def paper_regularization(choice: AChoice, problem: Problem, gamma: Optional[float] = None) -> Regularization:
    """A1/A2/A3 diagonal with γ = 1/L_max unless overridden."""
    if choice not in PAPER_ALPHAS:
        raise ConfigError(f"Unknown regularization choice {choice!r}; expected one of {sorted(PAPER_ALPHAS)}")
    alphas = np.array(PAPER_ALPHAS[choice])
    if gamma is None:
        if problem.block_lipschitz_f is None:
            raise ConfigError("Default gamma needs analytic Lipschitz data on the problem")
        gamma = 1.0 / float(np.max(problem.block_lipschitz_f + alphas))
    return Regularization(alphas=alphas, gamma=gamma)


def interior_upper_bound(
    choice: AChoice,
    upper: float = DEFAULT_UPPER,
    *,
    max_doublings: int = 8,
    tol: float = 1e-10,
) -> float:
    """
    Smallest upper bound upper·2^m keeping both minimizers off the upper face.

    Both the regularized and the unregularized minimizer are solved; when
    either sits on the upper bound, the bound doubles and the problem is
    rebuilt.
    """
    from async_blockopt.certify import solve_reference

    C = build_connection_matrix(PAPER_ROUTES)
    bound = float(upper)
    for _ in range(max_doublings + 1):
        problem = build_problem(C, upper=bound)
        reg = paper_regularization(choice, problem)
        x_hat_A = solve_reference(problem, reg)
        x_hat = solve_reference(problem, None)
        if np.all(x_hat_A < bound - tol) and np.all(x_hat < bound - tol):
            return bound
        logger.warning("Minimizer touches the upper bound %.6g for %s; doubling it", bound, choice)
        bound *= 2.0
    raise ConfigError(f"No interior upper bound found for {choice} within {max_doublings} doublings")


@lru_cache(maxsize=None)
def _cached_upper(choice: str, upper: float) -> float:
    return interior_upper_bound(choice, upper)  # type: ignore[arg-type]


def paper_problem(
    choice: AChoice,
    *,
    gamma: Optional[float] = None,
    upper: float = DEFAULT_UPPER,
) -> Tuple[Problem, Regularization]:
    """Routing problem and regularization with the box raised until interior."""
    problem = build_problem(build_connection_matrix(PAPER_ROUTES), upper=_cached_upper(choice, float(upper)))
    return problem, paper_regularization(choice, problem, gamma)


def paper_instance(
    choice: AChoice,
    seed: int,
    *,
    gamma: Optional[float] = None,
    schedule: Optional[ScheduleConfig] = None,
) -> World:
    """World at x0 = 0 with p_update = p_comm = 0.1 and instant delivery by default."""
    problem, reg = paper_problem(choice, gamma=gamma)
    sched = schedule or ScheduleConfig(p_update=DEFAULT_P, p_comm=DEFAULT_P)
    world = init_world(problem, reg, problem.layout, np.zeros(problem.n), seed, sched)
    logger.debug("Paper instance %s: gamma=%.6g upper=%.6g", choice, reg.gamma, float(problem.upper[0]))
    return world

