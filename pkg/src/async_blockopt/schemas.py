from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator, model_validator

from async_blockopt.engine import DelayModel, ScheduleConfig
from async_blockopt.errors import ConfigError, RegularizationError
from async_blockopt.netflow import (
    DEFAULT_UPPER,
    NUM_EDGES,
    SCALE_COUPLING,
    SCALE_LOCAL,
    build_connection_matrix,
    build_problem,
    load_routes,
    paper_problem,
)
from async_blockopt.problem import BlockLayout, Problem, Regularization, lipschitz_data

AChoice = Literal["A1", "A2", "A3"]

_INF_SPELLINGS = {"inf", "+inf", ".inf", "infinity", "+infinity"}


def _parse_order(v: Any) -> Any:
    if isinstance(v, str) and v.strip().lower() in _INF_SPELLINGS:
        return math.inf
    return v


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ========== Schedule ==========

class DelaySettings(_Strict):
    mode: Literal["instant", "queued"] = "instant"
    max_latency: int = Field(0, ge=0)

    def to_model(self) -> DelayModel:
        return DelayModel(mode=self.mode, max_latency=self.max_latency)


class ScheduleSettings(_Strict):
    p_update: float = Field(0.1, ge=0.0, le=1.0)
    p_comm: float = Field(0.1, ge=0.0, le=1.0)
    delay: DelaySettings = Field(default_factory=DelaySettings)

    def to_config(self) -> ScheduleConfig:
        return ScheduleConfig(p_update=self.p_update, p_comm=self.p_comm, delay=self.delay.to_model())


# ========== Instances ==========

class PaperInstance(_Strict):
    kind: Literal["paper"] = "paper"
    regularization: AChoice


class CustomInstance(_Strict):
    """A routing network with caller-supplied routes, costs, box and layout."""

    kind: Literal["custom"] = "custom"
    routes: Optional[Dict[int, List[int]]] = None
    routes_file: Optional[Path] = None
    num_edges: int = Field(NUM_EDGES, ge=1)
    scale_local: float = Field(SCALE_LOCAL, gt=0.0)
    scale_coupling: float = Field(SCALE_COUPLING, ge=0.0)
    upper: float = Field(DEFAULT_UPPER, gt=0.0)
    alphas: List[float] = Field(..., min_length=1)
    orders: Optional[List[float]] = None
    weights: Optional[List[float]] = None

    @field_validator("orders", mode="before")
    @classmethod
    def _inf_orders(cls, v: Any) -> Any:
        if isinstance(v, list):
            return [_parse_order(p) for p in v]
        return v

    @field_validator("alphas")
    @classmethod
    def _positive_alphas(cls, v: List[float]) -> List[float]:
        if any(not (a > 0 and math.isfinite(a)) for a in v):
            raise ValueError("every alpha must be a finite positive number")
        return v

    @field_validator("orders")
    @classmethod
    def _order_range(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(math.isnan(p) or p < 1.0 for p in v):
            raise ValueError("norm orders must lie in [1, inf]")
        return v

    @field_validator("weights")
    @classmethod
    def _weight_range(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(not (math.isfinite(w) and w >= 1.0) for w in v):
            raise ValueError("weights must be finite and >= 1")
        return v

    @field_serializer("orders")
    def _dump_orders(self, v: Optional[List[float]]) -> Optional[List[Union[float, str]]]:
        if v is None:
            return None
        return ["inf" if p == math.inf else p for p in v]

    @model_validator(mode="after")
    def _consistent(self) -> "CustomInstance":
        if (self.routes is None) == (self.routes_file is None):
            raise ValueError("give exactly one of 'routes' or 'routes_file'")
        n = len(self.alphas)
        if self.routes is not None:
            if sorted(self.routes) != list(range(1, n + 1)):
                raise ValueError(f"route agent ids must be 1..{n} to match the alphas")
            bad = [e for r in self.routes.values() for e in r if not 1 <= e <= self.num_edges]
            if bad:
                raise ValueError(f"edges {bad} fall outside 1..{self.num_edges}")
        for name in ("orders", "weights"):
            values = getattr(self, name)
            if values is not None and len(values) != n:
                raise ValueError(f"{len(values)} {name} but {n} alphas")
        return self

    def route_table(self) -> Dict[int, Tuple[int, ...]]:
        if self.routes is not None:
            return {a: tuple(r) for a, r in self.routes.items()}
        assert self.routes_file is not None
        table = load_routes(self.routes_file)
        if len(table) != len(self.alphas):
            raise ConfigError(f"{self.routes_file} lists {len(table)} routes but {len(self.alphas)} alphas were given")
        return table

    def layout(self) -> BlockLayout:
        n = len(self.alphas)
        return BlockLayout.scalar(self.orders or [2.0] * n, self.weights or [1.0] * n)


Instance = Union[PaperInstance, CustomInstance]


# ========== Experiment ==========

class ExperimentConfig(_Strict):
    """One simulation run: instance, schedule, horizon and outputs."""

    instance: Instance = Field(..., discriminator="kind")
    run_name: Optional[str] = Field(None, min_length=1, pattern=r"^[A-Za-z0-9._-]+$")
    seed: int = 0
    ticks: int = Field(20_000, ge=0)
    stride: int = Field(1, ge=1)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    gamma: Optional[float] = Field(None, gt=0.0)
    output_dir: Optional[Path] = None

    @property
    def name(self) -> str:
        if self.run_name:
            return self.run_name
        label = self.instance.regularization if isinstance(self.instance, PaperInstance) else "custom"
        return f"{label}-seed{self.seed}"

    def build_problem(self) -> Tuple[Problem, Regularization]:
        """Problem and regularization, with γ and every α_i checked against L_max."""
        inst = self.instance
        if isinstance(inst, PaperInstance):
            problem, reg = paper_problem(inst.regularization, gamma=self.gamma)
        else:
            C = build_connection_matrix(inst.route_table(), inst.num_edges)
            problem = build_problem(C, inst.scale_local, inst.scale_coupling, upper=inst.upper, layout=inst.layout())
            alphas = np.asarray(inst.alphas, dtype=float)
            gamma = self.gamma
            if gamma is None:
                gamma = 1.0 / float(np.max(np.asarray(problem.block_lipschitz_f) + alphas))
            reg = Regularization(alphas=alphas, gamma=gamma)
        try:
            reg.check_admissible(lipschitz_data(problem, reg))
        except RegularizationError as e:
            raise ConfigError(f"Inadmissible regularization: {e}") from e
        return problem, reg

    # ----- YAML round trip -----

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("Config must be a mapping at the top level")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid experiment config:\n{e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"No config file at {p}")
        return cls.from_yaml(p.read_text(encoding="utf-8"))

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude_none=True)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override values that are None are skipped."""
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = out.get(key)
            nested = merge_overrides(current if isinstance(current, dict) else {}, value)
            if nested or isinstance(current, dict):
                out[key] = nested
        else:
            out[key] = value
    return out
