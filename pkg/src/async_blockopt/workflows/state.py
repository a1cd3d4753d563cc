from __future__ import annotations

import operator
from datetime import datetime
from typing import Any, Dict, List, Optional, TypedDict

from typing_extensions import Annotated

from async_blockopt.schemas import ExperimentConfig


def merge_dicts(left: Dict[str, Any], right: Dict[str, Any]) -> Dict[str, Any]:
    """Merge two dicts, with right overwriting left."""
    return {**left, **right}


class ExperimentState(TypedDict, total=False):
    """State for one simulate-and-certify experiment run."""

    # ========== Inputs ==========
    config: ExperimentConfig
    run_dir: str
    write_artifacts: bool

    # ========== Stage Outputs ==========
    problem: Any
    reg: Any
    world: Any  # owned by the simulate stage once the graph fans out
    x_hat_A: Any
    x_hat: Any
    rate: Any
    trace: Any
    certificate: Any
    curve: Any
    artifacts: Dict[str, str]

    # ========== Metadata ==========
    completed_stages: Annotated[List[str], operator.add]
    errors: Annotated[List[Dict[str, str]], operator.add]
    timings: Annotated[Dict[str, float], merge_dicts]


def create_initial_state(
    config: ExperimentConfig,
    run_dir: str,
    write_artifacts: bool = True,
) -> ExperimentState:
    return ExperimentState(
        config=config,
        run_dir=run_dir,
        write_artifacts=write_artifacts,
        artifacts={},
        completed_stages=[],
        errors=[],
        timings={},
    )


def add_error(state: ExperimentState, stage: str, error: str) -> Dict[str, Any]:
    return {"errors": [{"stage": stage, "error": error, "timestamp": datetime.now().isoformat()}]}


def mark_stage_complete(state: ExperimentState, stage: str) -> Dict[str, Any]:
    return {"completed_stages": [stage]}


def add_timing(state: ExperimentState, stage: str, duration: float) -> Dict[str, Any]:
    return {"timings": {stage: duration}}


def first_error(state: ExperimentState) -> Optional[Dict[str, str]]:
    errors = state.get("errors") or []
    return errors[0] if errors else None
