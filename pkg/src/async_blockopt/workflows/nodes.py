from __future__ import annotations

import asyncio
import logging
import time
from pathlib import Path
from typing import Any, Dict

import numpy as np

from async_blockopt.certify import check_theorem3, rate_data, solve_reference
from async_blockopt.engine import init_world, run
from async_blockopt.reporting.tables import error_curve, write_run_artifacts
from async_blockopt.workflows.state import ExperimentState, add_error, add_timing, mark_stage_complete

logger = logging.getLogger(__name__)


def _upstream_failed(state: ExperimentState) -> bool:
    return bool(state.get("errors"))


# ========== Stage 1: Build Instance ==========

async def build_instance_node(state: ExperimentState) -> Dict[str, Any]:
    """Problem, regularization and a fresh World from the experiment config."""
    logger.info("[1/5] Building instance...")
    start_time = time.time()

    try:
        config = state["config"]
        problem, reg = await asyncio.to_thread(config.build_problem)
        world = init_world(
            problem,
            reg,
            problem.layout,
            np.zeros(problem.n),
            config.seed,
            config.schedule.to_config(),
        )
        duration = time.time() - start_time
        logger.info("Instance ready: %d agents, gamma=%.6g (%.2fs)", problem.num_agents, reg.gamma, duration)
        return {
            "problem": problem,
            "reg": reg,
            "world": world,
            **mark_stage_complete(state, "build_instance"),
            **add_timing(state, "build_instance", duration),
        }
    except Exception as e:
        logger.error("Instance build failed: %s", e)
        return add_error(state, "build_instance", str(e))


# ========== Stage 2a: Reference Minimizers (parallel) ==========

async def reference_node(state: ExperimentState) -> Dict[str, Any]:
    """Regularized and unregularized minimizers plus q and D0."""
    if _upstream_failed(state):
        return {}
    logger.info("[2/5] Solving reference minimizers...")
    start_time = time.time()

    try:
        problem, reg, world = state["problem"], state["reg"], state["world"]
        x_hat_A, x_hat = await asyncio.gather(
            asyncio.to_thread(solve_reference, problem, reg),
            asyncio.to_thread(solve_reference, problem, None),
        )
        initial_views = np.tile(world.x0, (problem.num_agents, 1))
        rate = await asyncio.to_thread(rate_data, problem, reg, initial_views, x_hat_A=x_hat_A)

        duration = time.time() - start_time
        logger.info("Reference done: q=%.9f D0=%.6g (%.2fs)", rate.q, rate.d0, duration)
        return {
            "x_hat_A": x_hat_A,
            "x_hat": x_hat,
            "rate": rate,
            **mark_stage_complete(state, "reference"),
            **add_timing(state, "reference", duration),
        }
    except Exception as e:
        logger.error("Reference solve failed: %s", e)
        return add_error(state, "reference", str(e))


# ========== Stage 2b: Simulation (parallel) ==========

async def simulate_node(state: ExperimentState) -> Dict[str, Any]:
    if _upstream_failed(state):
        return {}
    config = state["config"]
    logger.info("[3/5] Simulating %d ticks (seed %d)...", config.ticks, config.seed)
    start_time = time.time()

    try:
        metadata = {"config": config.to_dict(), "run_name": config.name}
        trace = await asyncio.to_thread(run, state["world"], config.ticks, stride=config.stride, metadata=metadata)
        duration = time.time() - start_time
        logger.info("Simulation done: %d events (%.2fs)", len(trace.events), duration)
        return {
            "trace": trace,
            **mark_stage_complete(state, "simulate"),
            **add_timing(state, "simulate", duration),
        }
    except Exception as e:
        logger.error("Simulation failed: %s", e)
        return add_error(state, "simulate", str(e))


# ========== Stage 3: Certification ==========

async def certify_node(state: ExperimentState) -> Dict[str, Any]:
    if _upstream_failed(state):
        return {}
    logger.info("[4/5] Certifying the cycle-rate bound...")
    start_time = time.time()

    try:
        trace, rate = state["trace"], state["rate"]
        certificate = await asyncio.to_thread(check_theorem3, trace, rate)
        curve = await asyncio.to_thread(error_curve, trace, rate, state["x_hat"])
        duration = time.time() - start_time
        logger.info(
            "Certificate: %d cycles, %d violations (%.2fs)",
            certificate.total_cycles,
            certificate.violations,
            duration,
        )
        return {
            "certificate": certificate,
            "curve": curve,
            **mark_stage_complete(state, "certify"),
            **add_timing(state, "certify", duration),
        }
    except Exception as e:
        logger.error("Certification failed: %s", e)
        return add_error(state, "certify", str(e))


# ========== Stage 4: Artifacts ==========

async def artifacts_node(state: ExperimentState) -> Dict[str, Any]:
    """Trace, certificate and error curve files under the run directory."""
    logger.info("[5/5] Writing artifacts...")
    start_time = time.time()

    try:
        paths = await asyncio.to_thread(
            write_run_artifacts,
            Path(state["run_dir"]),
            state["trace"],
            state["certificate"],
            state["curve"],
        )
        duration = time.time() - start_time
        return {
            "artifacts": {name: str(p) for name, p in paths.items()},
            **mark_stage_complete(state, "artifacts"),
            **add_timing(state, "artifacts", duration),
        }
    except Exception as e:
        logger.error("Writing artifacts failed: %s", e)
        return add_error(state, "artifacts", str(e))
