from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table

from async_blockopt.certify import Certificate, RateData, agent_errors, count_cycles
from async_blockopt.engine import Trace
from async_blockopt.errors import ReportError
from async_blockopt.netflow import PUBLISHED_REGULARIZED_ERRORS, PUBLISHED_UNREGULARIZED_ERRORS
from async_blockopt.problem import FloatArray
from async_blockopt.trace_io import write_atomic, write_trace

logger = logging.getLogger(__name__)

CERTIFICATE_COLUMNS = ("tick", "cycles", "bound", "observed", "passed")
ERROR_CURVE_COLUMNS = ("tick", "cycles", "regularized_error", "unregularized_error", "bound")
REPORT_COLUMNS = ("label", "alpha_norm", "final_regularized_error", "final_unregularized_error")

REPORTED_AGENT = 0  # agent 1 in the published numbering
REQUIRED_RUNS = ("A1", "A2", "A3")

REPORT_HEADER = (
    "Errors for agent 1: block-max distance of agent 1's full local copy to the "
    "regularized (x̂_A) and unregularized (x̂) minimizers at the final tick."
)


def _csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ========== Per-run tables ==========

def certificate_csv(cert: Certificate) -> str:
    return _csv(
        CERTIFICATE_COLUMNS,
        ((r.tick, r.cycles, repr(r.bound), repr(r.observed), int(r.passed)) for r in cert.rows),
    )


class ErrorCurve(BaseModel):
    """Per-snapshot errors of one agent's local copy."""

    agent: int = REPORTED_AGENT
    ticks: List[int] = Field(default_factory=list)
    cycles: List[int] = Field(default_factory=list)
    regularized_error: List[float] = Field(default_factory=list)
    unregularized_error: List[float] = Field(default_factory=list)
    bound: List[float] = Field(default_factory=list)

    def final_regularized(self) -> float:
        return self.regularized_error[-1]

    def final_unregularized(self) -> float:
        return self.unregularized_error[-1]

    def to_csv(self) -> str:
        return _csv(
            ERROR_CURVE_COLUMNS,
            (
                (t, c, repr(r), repr(u), repr(b))
                for t, c, r, u, b in zip(
                    self.ticks, self.cycles, self.regularized_error, self.unregularized_error, self.bound
                )
            ),
        )


def error_curve(trace: Trace, rate: RateData, x_hat: FloatArray, agent: int = REPORTED_AGENT) -> ErrorCurve:
    """Regularized and unregularized error of `agent`'s copy, with the cycle bound."""
    ticks = trace.snapshot_ticks()
    c = count_cycles(trace.events, trace.num_agents, horizon=trace.end_tick, start=trace.start_tick)[ticks]
    views = trace.snapshot_views()[:, agent, :]
    reg_err = agent_errors(views, rate.x_hat_A, trace.layout)
    unreg_err = agent_errors(views, x_hat, trace.layout)
    return ErrorCurve(
        agent=agent,
        ticks=ticks.tolist(),
        cycles=c.tolist(),
        regularized_error=reg_err.tolist(),
        unregularized_error=unreg_err.tolist(),
        bound=(rate.q ** c.astype(float) * rate.d0).tolist(),
    )


def write_run_artifacts(
    run_dir: Path,
    trace: Trace,
    cert: Certificate,
    curve: ErrorCurve,
) -> Dict[str, Path]:
    """Write trace.jsonl, certificate.csv and error_curve.csv, each atomically."""
    paths = {
        "trace": write_trace(trace, run_dir / "trace.jsonl"),
        "certificate": write_atomic(run_dir / "certificate.csv", certificate_csv(cert)),
        "error_curve": write_atomic(run_dir / "error_curve.csv", curve.to_csv()),
    }
    logger.info("Saved run artifacts to %s", run_dir)
    return paths


# ========== Comparison report ==========

class ReportRow(BaseModel):
    label: str
    alpha_norm: float = Field(..., ge=0.0)
    final_regularized_error: float = Field(..., ge=0.0)
    final_unregularized_error: float = Field(..., ge=0.0)


class ComparisonReport(BaseModel):
    header: str = REPORT_HEADER
    rows: List[ReportRow]

    def to_csv(self) -> str:
        return _csv(
            REPORT_COLUMNS,
            (
                (r.label, repr(r.alpha_norm), repr(r.final_regularized_error), repr(r.final_unregularized_error))
                for r in self.rows
            ),
        )


def emit_report(runs: Mapping[str, ReportRow], required: Sequence[str] = REQUIRED_RUNS) -> ComparisonReport:
    """
    Order runs by ‖A‖ and check that the unregularized error grows strictly.

    Raises:
        ReportError: a required run is missing, or the ordering fails.
    """
    missing = [label for label in required if label not in runs]
    if missing:
        raise ReportError(f"Missing runs for {missing}; the report needs {list(required)}")

    rows = sorted((runs[label] for label in required), key=lambda r: r.alpha_norm)
    for prev, cur in zip(rows, rows[1:]):
        if not cur.final_unregularized_error > prev.final_unregularized_error:
            raise ReportError(
                f"Unregularized error is not strictly increasing in ‖A‖: "
                f"{prev.label} (‖A‖={prev.alpha_norm:.3g}) has {prev.final_unregularized_error:.6e}, "
                f"{cur.label} (‖A‖={cur.alpha_norm:.3g}) has {cur.final_unregularized_error:.6e}"
            )
    return ComparisonReport(rows=rows)


def report_row(label: str, alphas: FloatArray, curve: ErrorCurve) -> ReportRow:
    return ReportRow(
        label=label,
        alpha_norm=float(np.max(alphas)),
        final_regularized_error=curve.final_regularized(),
        final_unregularized_error=curve.final_unregularized(),
    )


def render_report(report: ComparisonReport, console: Optional[Console] = None) -> Table:
    table = Table(title="Regularization trade-off", caption=report.header)
    table.add_column("run")
    table.add_column("‖A‖", justify="right")
    table.add_column("final regularized error", justify="right")
    table.add_column("final unregularized error", justify="right")
    table.add_column("published regularized", justify="right")
    table.add_column("published unregularized", justify="right")
    for row in report.rows:
        published = (PUBLISHED_REGULARIZED_ERRORS.get(row.label), PUBLISHED_UNREGULARIZED_ERRORS.get(row.label))
        table.add_row(
            row.label,
            f"{row.alpha_norm:.3g}",
            f"{row.final_regularized_error:.4e}",
            f"{row.final_unregularized_error:.4e}",
            *("-" if value is None else f"{value:.4e}" for value in published),
        )
    if console is not None:
        console.print(table)
    return table


def render_certificate(label: str, cert: Certificate, console: Console) -> None:
    status = "[green]PASS[/green]" if cert.passed else "[red]FAIL[/red]"
    console.print(
        f"{label}: {status}  cycles={cert.total_cycles}  q={cert.q:.9f}  D0={cert.d0:.6g}  "
        f"violations={cert.violations}  max_violation={cert.max_violation:.3e}"
    )
    for note in cert.notes:
        console.print(f"  [yellow]note:[/yellow] {note}")
