import dataclasses
import math

import numpy as np
import pytest

from async_blockopt.blocknorm import block_max_norm
from async_blockopt.certify import (
    Certificate,
    RateData,
    check_assumption4_step,
    check_theorem3,
    compute_D0,
    compute_q,
    count_cycles,
    cycle_completions,
    default_tol_cert,
    fixed_point_residual,
    nested_level,
    rate_data,
    regularization_gap,
    sample_level_set,
    solve_reference,
)
from async_blockopt.engine import DeliverEvent, ScheduleConfig, Snapshot, UpdateEvent, init_world, run
from async_blockopt.errors import (
    ConvergenceError,
    DimensionError,
    MalformedLogError,
    PreconditionError,
    RegularizationError,
)
from async_blockopt.netflow import paper_regularization
from async_blockopt.problem import BlockLayout, Regularization, contains, lipschitz_data
from tests.conftest import quadratic_problem

SYNCHRONOUS = ScheduleConfig(p_update=1.0, p_comm=1.0)


# ========== q ==========

class TestComputeQ:
    def test_formula(self):
        assert compute_q(0.5, [0.2, 0.2], [1.5, 1.5]) == pytest.approx(0.9)

    def test_perfect_contraction(self):
        L = 4.0
        assert compute_q(1.0 / L, [L, L, L], [L, L, L]) == 0.0

    def test_routing_a2_in_unit_interval(self, paper_a2):
        problem, reg = paper_a2
        lips = lipschitz_data(problem, reg)
        q = compute_q(reg.gamma, reg.alphas, lips.block)
        expected = max(max(abs(1 - reg.gamma * a) for a in reg.alphas), max(abs(1 - reg.gamma * L) for L in lips.block))
        assert 0.0 < q < 1.0
        assert q == pytest.approx(expected, rel=1e-15)

    def test_random_admissible_tuples(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 10))
            lips = rng.uniform(0.1, 100.0, size=n)
            l_max = lips.max()
            alphas = rng.uniform(1e-6, 1.0, size=n) * l_max
            gamma = rng.uniform(1e-6, 1.0) * 2.0 / l_max
            assert 0.0 < compute_q(gamma, alphas, lips) < 1.0

    def test_boundary_stepsize_approaches_one(self):
        lips = np.array([2.0, 5.0])
        alphas = np.array([0.5, 1.0])
        previous = 0.0
        for eps in (1e-2, 1e-4, 1e-6, 1e-8):
            q = compute_q((2.0 / lips.max()) * (1 - eps), alphas, lips)
            assert previous < q < 1.0
            previous = q
        assert previous > 1 - 1e-7

    def test_empty_and_mismatched(self):
        with pytest.raises(PreconditionError):
            compute_q(0.1, [], [])
        with pytest.raises(DimensionError):
            compute_q(0.1, [0.1, 0.2], [1.0])


# ========== Reference minimizers ==========

class TestSolveReference:
    def test_origin_minimizer(self):
        problem = quadratic_problem(BlockLayout.uniform(3, size=2), lower=-1.0, upper=1.0)
        reg = Regularization(alphas=np.ones(3), gamma=0.5)
        x = solve_reference(problem, reg, x0=np.full(6, 0.7))
        np.testing.assert_allclose(x, 0.0, atol=1e-11)

    def test_active_constraint(self):
        problem = quadratic_problem(BlockLayout.uniform(1), scales=(1.0,), center=5.0, lower=0.0, upper=1.0)
        assert solve_reference(problem, None).tolist() == [1.0]

    def test_routing_fixed_point(self, paper_a1):
        problem, reg = paper_a1
        step = 1.0 / lipschitz_data(problem, reg).l_max
        x_hat = solve_reference(problem, reg)
        assert fixed_point_residual(problem, reg, x_hat, step) <= 1e-11
        x_half = solve_reference(problem, reg, 1e-13, step=0.5 * step)
        np.testing.assert_allclose(x_hat, x_half, rtol=0, atol=1e-9)
        assert contains(problem, x_hat)
        assert np.all(x_hat < problem.upper)

    def test_iteration_cap(self, routing_problem):
        reg = paper_regularization("A1", routing_problem)
        with pytest.raises(ConvergenceError) as info:
            solve_reference(routing_problem, reg, max_iter=3)
        assert info.value.iterations == 3
        assert info.value.residual > 0

    def test_bad_tolerance(self, routing_problem):
        with pytest.raises(PreconditionError):
            solve_reference(routing_problem, None, tol=0.0)


class TestD0:
    def test_all_views_at_minimizer(self):
        layout = BlockLayout.uniform(2, size=2)
        x_hat = np.array([1.0, 2.0, 3.0, 4.0])
        assert compute_D0(np.tile(x_hat, (2, 1)), x_hat, layout) == 0.0

    def test_weighted_scalar_block(self):
        layout = BlockLayout.scalar((2.0,), (2.0,))
        assert compute_D0(np.array([[4.0]]), np.array([0.0]), layout) == 2.0

    def test_routing_from_origin(self, paper_a1):
        problem, reg = paper_a1
        x_hat = solve_reference(problem, reg)
        expected = max(abs(x_hat[i]) / w for i, w in enumerate(problem.layout.weights))
        d0 = compute_D0(np.zeros((8, 8)), x_hat, problem.layout)
        assert d0 > 0
        assert d0 == pytest.approx(expected, rel=1e-15)


class TestRateData:
    def test_paper_rate_contracts(self, rate_a2):
        assert 0.0 < rate_a2.q < 1.0
        assert rate_a2.radius(1) < rate_a2.radius(0) == rate_a2.d0

    def test_stepsize_beyond_two_over_l_max_is_rejected(self, paper_a2):
        problem, reg = paper_a2
        too_large = Regularization(alphas=reg.alphas, gamma=1.0)
        with pytest.raises(RegularizationError, match="2/L_max"):
            rate_data(problem, too_large, np.zeros((8, 8)))


# ========== Cycles ==========

class TestCycles:
    def test_single_agent_counts_updates(self):
        events = [UpdateEvent(1, 0), UpdateEvent(3, 0), UpdateEvent(4, 0)]
        assert count_cycles(events, 1).tolist() == [0, 1, 1, 2, 3]

    def test_two_agent_log(self):
        events = [
            UpdateEvent(1, 0),
            UpdateEvent(2, 1),
            DeliverEvent(3, 0, 1, 1),
            DeliverEvent(4, 1, 0, 2),
        ]
        c = count_cycles(events, 2)
        assert c[3] == 0
        assert c[4] == 1

    def test_stale_delivery_does_not_count(self):
        events = [
            DeliverEvent(1, 0, 1, 0),
            UpdateEvent(2, 0),
            UpdateEvent(2, 1),
            DeliverEvent(3, 0, 1, 0),
            DeliverEvent(3, 1, 0, 2),
        ]
        assert count_cycles(events, 2).tolist() == [0, 0, 0, 0]

    def test_synchronous_run_completes_every_second_tick(self, routing_problem):
        reg = paper_regularization("A2", routing_problem)
        world = init_world(routing_problem, reg, routing_problem.layout, np.zeros(8), 0, SYNCHRONOUS)
        trace = run(world, 10)
        c = count_cycles(trace.events, 8, horizon=10)
        assert c.tolist() == [k // 2 for k in range(11)]

    def test_counts_are_monotone_unit_steps(self, routing_problem):
        reg = paper_regularization("A2", routing_problem)
        world = init_world(routing_problem, reg, routing_problem.layout, np.zeros(8), 4, ScheduleConfig())
        trace = run(world, 3000, stride=3000)
        c = count_cycles(trace.events, 8, horizon=3000)
        steps = np.diff(c)
        assert set(np.unique(steps).tolist()) <= {0, 1}
        assert c[-1] > 0
        assert len(cycle_completions(trace.events, 8)) == c[-1]

    def test_horizon_extends_with_last_value(self):
        c = count_cycles([UpdateEvent(1, 0)], 1, horizon=4)
        assert c.tolist() == [0, 1, 1, 1, 1]

    @pytest.mark.parametrize(
        "events",
        [
            [UpdateEvent(3, 0), UpdateEvent(2, 1)],
            [DeliverEvent(2, 1, 1, 0)],
            [DeliverEvent(2, 0, 1, 3)],
            [UpdateEvent(1, 5)],
            [DeliverEvent(2, 0, 1, -1)],
        ],
    )
    def test_malformed_logs(self, events):
        with pytest.raises(MalformedLogError):
            count_cycles(events, 2)

    def test_horizon_before_last_event(self):
        with pytest.raises(MalformedLogError):
            count_cycles([UpdateEvent(5, 0)], 1, horizon=3)


# ========== Certification ==========

def synchronous_a2_trace(paper_a2, ticks=500):
    problem, reg = paper_a2
    world = init_world(problem, reg, problem.layout, np.zeros(8), 0, SYNCHRONOUS)
    return run(world, ticks)


class TestCheckTheorem3:
    def test_synchronous_run_passes(self, paper_a2, rate_a2):
        trace = synchronous_a2_trace(paper_a2)
        cert = check_theorem3(trace, rate_a2)
        assert isinstance(cert, Certificate)
        assert cert.passed
        assert cert.total_cycles == 250
        assert len(cert.rows) == 501
        assert cert.tol_cert == default_tol_cert(rate_a2.d0)

    def test_initial_row_sits_on_the_bound(self, paper_a2, rate_a2):
        cert = check_theorem3(synchronous_a2_trace(paper_a2, ticks=5), rate_a2)
        first = cert.rows[0]
        assert first.tick == 0
        assert first.cycles == 0
        assert first.bound == rate_a2.d0
        assert first.observed == pytest.approx(rate_a2.d0, rel=1e-15)
        assert first.passed

    def test_corrupted_snapshot_is_reported(self, paper_a2, rate_a2):
        trace = synchronous_a2_trace(paper_a2, ticks=20)
        x_hat = rate_a2.x_hat_A
        first = trace.snapshots[0]
        doubled = Snapshot(first.tick, x_hat + 2.0 * (first.views - x_hat))
        corrupted = dataclasses.replace(trace, snapshots=(doubled,) + trace.snapshots[1:])
        cert = check_theorem3(corrupted, rate_a2)
        assert cert.violations == 1
        assert not cert.rows[0].passed
        assert cert.max_violation == pytest.approx(rate_a2.d0, rel=1e-12)

    def test_clamped_updates_are_noted(self, paper_a2, rate_a2):
        trace = synchronous_a2_trace(paper_a2, ticks=5)
        noted = dataclasses.replace(trace, clamp_count=3)
        assert check_theorem3(noted, rate_a2).notes == ("3 updates were clamped to the box",)


# ========== Level sets ==========

def scalar_rate(alpha=0.5, gamma=1.0, d0=4.0):
    layout = BlockLayout.uniform(1)
    return RateData(
        q=compute_q(gamma, [alpha], [alpha]),
        d0=d0,
        x_hat_A=np.zeros(1),
        gamma=gamma,
        alphas=np.array([alpha]),
        lipschitz=np.array([alpha]),
        layout=layout,
    )


class TestNestedLevel:
    def test_minimizer_is_in_every_level(self):
        assert nested_level(np.zeros(1), scalar_rate()) == math.inf

    def test_outer_boundary(self):
        assert nested_level(np.array([4.0]), scalar_rate()) == 0.0

    def test_interior_level(self):
        rate = scalar_rate()
        assert nested_level(np.array([rate.radius(3.5)]), rate) == 3.0

    def test_outside_first_level(self):
        with pytest.raises(PreconditionError):
            nested_level(np.array([5.0]), scalar_rate())


class TestAssumption4:
    def test_scalar_contraction_at_boundary(self):
        rate = scalar_rate()
        problem = quadratic_problem(BlockLayout.uniform(1))
        reg = Regularization(alphas=np.array([0.5]), gamma=1.0)
        for s in range(6):
            for sign in (1.0, -1.0):
                assert check_assumption4_step(problem, reg, np.array([sign * rate.radius(s)]), s, rate)

    def test_point_outside_level_rejected(self):
        rate = scalar_rate()
        problem = quadratic_problem(BlockLayout.uniform(1))
        reg = Regularization(alphas=np.array([0.5]), gamma=1.0)
        with pytest.raises(PreconditionError):
            check_assumption4_step(problem, reg, np.array([rate.radius(1) * 1.5]), 2, rate)

    def test_minimizer_maps_to_itself(self, paper_a2, rate_a2):
        problem, reg = paper_a2
        for s in range(6):
            assert check_assumption4_step(problem, reg, rate_a2.x_hat_A, s, rate_a2)

    def test_level_samples_lie_in_the_level(self, paper_a2, rate_a2, rng):
        problem, _ = paper_a2
        for s in (0, 3):
            pts = sample_level_set(problem, rate_a2, s, rng, 100)
            assert pts.shape == (100, 8)
            for y in pts:
                assert contains(problem, y)
                assert block_max_norm(y - rate_a2.x_hat_A, problem.layout) <= rate_a2.radius(s) * (1 + 1e-12)

    def test_level_samples_in_multi_dimensional_blocks(self, rng):
        layout = BlockLayout(sizes=(3, 2), orders=(1.0, 2.0), weights=(1.0, 2.0))
        problem = quadratic_problem(layout)
        rate = RateData(
            q=0.5, d0=1.0, x_hat_A=np.zeros(5), gamma=1.0, alphas=np.ones(2), lipschitz=np.ones(2), layout=layout
        )
        pts = sample_level_set(problem, rate, 1, rng, 200)
        assert all(block_max_norm(p, layout) <= 0.5 * (1 + 1e-12) for p in pts)


# ========== Regularization gap ==========

def test_gap_grows_with_regularization(paper_a1, paper_a2, paper_a3):
    gaps = [regularization_gap(problem, reg) for problem, reg in (paper_a1, paper_a2, paper_a3)]
    assert 0.0 < gaps[0] < gaps[1] < gaps[2]
