from __future__ import annotations

import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence

from langgraph.checkpoint.base import BaseCheckpointSaver
from langgraph.graph import END, START, StateGraph

from async_blockopt.schemas import ExperimentConfig
from async_blockopt.settings import RuntimeSettings
from async_blockopt.workflows.nodes import (
    artifacts_node,
    build_instance_node,
    certify_node,
    reference_node,
    simulate_node,
)
from async_blockopt.workflows.state import ExperimentState, create_initial_state

logger = logging.getLogger(__name__)


# ========== Conditional Edge Logic ==========

def should_write_artifacts(state: ExperimentState) -> Literal["artifacts", "end"]:
    """Artifacts are written only for a run that certified without pipeline errors."""
    if state.get("errors"):
        return "end"
    if not state.get("write_artifacts", True):
        return "end"
    return "artifacts"


# ========== Graph Construction ==========

def create_experiment_graph(checkpointer: Optional[BaseCheckpointSaver] = None) -> Any:
    """
    Create the simulate-and-certify workflow graph.

    Flow:
        START → build_instance → [reference, simulate] (parallel)
              → certify → artifacts (conditional) → END

    Args:
        checkpointer: Optional checkpoint saver. The state carries numpy arrays
                      and live World objects, so only in-memory savers apply.

    Returns:
        Compiled StateGraph ready for execution.
    """
    workflow = StateGraph(ExperimentState)

    workflow.add_node("build_instance", build_instance_node)
    workflow.add_node("reference", reference_node)
    workflow.add_node("simulate", simulate_node)
    workflow.add_node("certify", certify_node)
    workflow.add_node("artifacts", artifacts_node)

    workflow.add_edge(START, "build_instance")

    # Parallel: build_instance → [reference, simulate]
    workflow.add_edge("build_instance", "reference")
    workflow.add_edge("build_instance", "simulate")

    # Synchronization point
    workflow.add_edge("reference", "certify")
    workflow.add_edge("simulate", "certify")

    workflow.add_conditional_edges(
        "certify",
        should_write_artifacts,
        {
            "artifacts": "artifacts",
            "end": END,
        },
    )
    workflow.add_edge("artifacts", END)

    if checkpointer is None:
        return workflow.compile()
    return workflow.compile(checkpointer=checkpointer)


def create_graph_no_checkpointing() -> Any:
    return create_experiment_graph(checkpointer=None)


# ========== Runners ==========

def resolve_run_dir(config: ExperimentConfig, settings: Optional[RuntimeSettings] = None) -> Path:
    base = config.output_dir or (settings or RuntimeSettings.default()).output_dir
    return Path(base) / config.name


async def run_experiment(
    config: ExperimentConfig,
    *,
    settings: Optional[RuntimeSettings] = None,
    write_artifacts: bool = True,
    graph: Any = None,
) -> ExperimentState:
    """
    Run one experiment end to end and return the final state.

    Usage:
        final = await run_experiment(ExperimentConfig.load("a1.yaml"))
        print(final["certificate"].violations)
    """
    graph = graph or create_graph_no_checkpointing()
    initial = create_initial_state(config, str(resolve_run_dir(config, settings)), write_artifacts)
    final_state = await graph.ainvoke(initial, {})
    for err in final_state.get("errors", []):
        logger.error("Stage %s failed: %s", err["stage"], err["error"])
    return final_state


async def run_experiments(
    configs: Sequence[ExperimentConfig],
    *,
    settings: Optional[RuntimeSettings] = None,
    write_artifacts: bool = True,
) -> Dict[str, ExperimentState]:
    """Independent experiments run concurrently, keyed by run name."""
    graph = create_graph_no_checkpointing()
    states = await asyncio.gather(
        *(run_experiment(c, settings=settings, write_artifacts=write_artifacts, graph=graph) for c in configs)
    )
    return {c.name: s for c, s in zip(configs, states)}
