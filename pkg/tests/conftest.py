from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pytest

from async_blockopt.certify import rate_data
from async_blockopt.netflow import PAPER_ROUTES, build_connection_matrix, build_problem, paper_problem
from async_blockopt.problem import BlockLayout, Problem, Quadratic, ZeroObjective


def quadratic_problem(
    layout: BlockLayout,
    *,
    scales: Optional[Sequence[float]] = None,
    center: float = 0.0,
    lower: float = -10.0,
    upper: float = 10.0,
) -> Problem:
    """Separable ½·scale·‖x_i − center‖² blocks (or zero blocks) with no coupling."""
    if scales is None:
        local = tuple(ZeroObjective() for _ in range(layout.num_blocks))
    else:
        local = tuple(Quadratic(scale=s, center=center) for s in scales)
    return Problem(layout=layout, local=local, coupling=ZeroObjective(), lower=lower, upper=upper, name="toy")


@pytest.fixture(scope="session")
def routing_matrix() -> np.ndarray:
    return build_connection_matrix(PAPER_ROUTES)


@pytest.fixture(scope="session")
def routing_problem(routing_matrix) -> Problem:
    """Routing instance on the unraised box [0, 10]^8."""
    return build_problem(routing_matrix)


@pytest.fixture(scope="session")
def paper_a1():
    return paper_problem("A1")


@pytest.fixture(scope="session")
def paper_a2():
    return paper_problem("A2")


@pytest.fixture(scope="session")
def paper_a3():
    return paper_problem("A3")


@pytest.fixture(scope="session")
def rate_a2(paper_a2):
    problem, reg = paper_a2
    return rate_data(problem, reg, np.zeros((problem.num_agents, problem.n)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
