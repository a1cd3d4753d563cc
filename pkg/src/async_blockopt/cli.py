from __future__ import annotations

import asyncio
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, NoReturn, Optional

import typer
import yaml
from dotenv import load_dotenv
from rich.console import Console
from typing_extensions import Annotated

from async_blockopt.certify import certify_trace_file
from async_blockopt.engine import DelayMode
from async_blockopt.errors import BlockOptError, ConfigError, MalformedLogError, ReportError, RoutingError
from async_blockopt.reporting.tables import emit_report, render_certificate, render_report, report_row
from async_blockopt.schemas import ExperimentConfig, merge_overrides
from async_blockopt.settings import RuntimeSettings, configure_logging
from async_blockopt.trace_io import write_atomic
from async_blockopt.workflows.graph import run_experiment, run_experiments

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_CONFIG = 2
EXIT_VIOLATIONS = 3
EXIT_REPORT_ORDER = 4

app = typer.Typer(
    name="async-blockopt",
    help="Simulate asynchronous regularized block gradient descent and certify its cycle-rate bound.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console()


class PaperChoice(str, Enum):
    A1 = "A1"
    A2 = "A2"
    A3 = "A3"


@app.callback()
def main(
    log_level: Annotated[
        Optional[str],
        typer.Option("--log-level", help="Logging level (default from ASYNC_BLOCKOPT_LOG_LEVEL or INFO)"),
    ] = None,
) -> None:
    load_dotenv()
    settings = RuntimeSettings.default()
    configure_logging(log_level or settings.log_level)


def _load_base(config_path: Optional[Path]) -> Dict[str, Any]:
    if config_path is None:
        return {}
    if not config_path.is_file():
        raise ConfigError(f"No config file at {config_path}")
    try:
        data = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{config_path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path} must hold a mapping at the top level")
    return data


def _fail_config(message: str) -> NoReturn:
    console.print(f"[red]Invalid configuration:[/red] {message}")
    raise typer.Exit(EXIT_INVALID_CONFIG)


@app.command("run")
def run_command(
    config_path: Annotated[
        Optional[Path],
        typer.Option("--config", "-c", help="YAML experiment config; flags override its values"),
    ] = None,
    paper: Annotated[
        Optional[PaperChoice],
        typer.Option("--paper", help="Use the published routing instance with regularization A1, A2 or A3"),
    ] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="RNG seed")] = None,
    ticks: Annotated[Optional[int], typer.Option("--ticks", help="Number of simulated ticks")] = None,
    stride: Annotated[Optional[int], typer.Option("--stride", help="Snapshot every N ticks")] = None,
    p_update: Annotated[Optional[float], typer.Option("--p-update", help="Per-agent update probability")] = None,
    p_comm: Annotated[Optional[float], typer.Option("--p-comm", help="Per-pair communication probability")] = None,
    delay: Annotated[Optional[DelayMode], typer.Option("--delay", help="Delivery model")] = None,
    max_latency: Annotated[
        Optional[int], typer.Option("--max-latency", help="Queued mode latency bound in ticks")
    ] = None,
    gamma: Annotated[Optional[float], typer.Option("--gamma", help="Stepsize override (default 1/L_max)")] = None,
    output_dir: Annotated[Optional[Path], typer.Option("--output-dir", "-o", help="Artifact root directory")] = None,
    run_name: Annotated[Optional[str], typer.Option("--run-name", help="Subdirectory name for this run")] = None,
) -> None:
    """Run one experiment, certify it and write trace, certificate and error curve.

    Examples:

        async-blockopt run --paper A1 --seed 42 --ticks 20000

        async-blockopt run --config experiment.yaml --seed 7
    """
    try:
        base = _load_base(config_path)
    except ConfigError as e:
        _fail_config(str(e))

    overrides: Dict[str, Any] = {
        "seed": seed,
        "ticks": ticks,
        "stride": stride,
        "gamma": gamma,
        "output_dir": str(output_dir) if output_dir else None,
        "run_name": run_name,
        "schedule": {
            "p_update": p_update,
            "p_comm": p_comm,
            "delay": {"mode": delay.value if delay else None, "max_latency": max_latency},
        },
    }
    merged = merge_overrides(base, overrides)
    if paper:
        merged["instance"] = {"kind": "paper", "regularization": paper.value}
    if "instance" not in merged:
        _fail_config("choose an instance with --paper or a config file")

    try:
        config = ExperimentConfig.from_dict(merged)
        config.build_problem()
    except (ConfigError, RoutingError, OSError) as e:
        _fail_config(str(e))

    try:
        final = asyncio.run(run_experiment(config))
    except BlockOptError as e:
        console.print(f"[red]Run failed:[/red] {e}")
        raise typer.Exit(EXIT_FAILURE)

    errors = final.get("errors") or []
    if errors:
        for err in errors:
            console.print(f"[red]{err['stage']} failed:[/red] {err['error']}")
        raise typer.Exit(EXIT_FAILURE)

    cert = final["certificate"]
    render_certificate(config.name, cert, console)
    for name, path in (final.get("artifacts") or {}).items():
        console.print(f"  {name}: {path}")
    if not cert.passed:
        raise typer.Exit(EXIT_VIOLATIONS)


@app.command("certify")
def certify_command(
    trace_path: Annotated[Path, typer.Argument(help="Trace file written by `run`")],
    tol: Annotated[Optional[float], typer.Option("--tol", help="Certificate tolerance (default 1e-9·(1+D0))")] = None,
) -> None:
    """Re-check a saved trace against the cycle-rate bound."""
    try:
        cert = certify_trace_file(trace_path, tol)
    except (MalformedLogError, ConfigError, FileNotFoundError) as e:
        console.print(f"[red]Cannot certify {trace_path}:[/red] {e}")
        raise typer.Exit(EXIT_INVALID_CONFIG)
    except BlockOptError as e:
        console.print(f"[red]Certification failed:[/red] {e}")
        raise typer.Exit(EXIT_FAILURE)

    render_certificate(str(trace_path), cert, console)
    if not cert.passed:
        raise typer.Exit(EXIT_VIOLATIONS)


@app.command("report")
def report_command(
    seed: Annotated[int, typer.Option("--seed", help="RNG seed shared by the three runs")] = 42,
    ticks: Annotated[int, typer.Option("--ticks", help="Number of simulated ticks per run")] = 20_000,
    stride: Annotated[int, typer.Option("--stride", help="Snapshot every N ticks")] = 10,
    gamma: Annotated[Optional[float], typer.Option("--gamma", help="Stepsize override (default 1/L_max)")] = None,
    output_dir: Annotated[Optional[Path], typer.Option("--output-dir", "-o", help="Artifact root directory")] = None,
) -> None:
    """Run A1, A2 and A3 concurrently and compare final errors against ‖A‖."""
    try:
        configs = [
            ExperimentConfig.from_dict(
                merge_overrides(
                    {"instance": {"kind": "paper", "regularization": choice.value}},
                    {
                        "seed": seed,
                        "ticks": ticks,
                        "stride": stride,
                        "gamma": gamma,
                        "output_dir": str(output_dir) if output_dir else None,
                    },
                )
            )
            for choice in PaperChoice
        ]
        for config in configs:
            config.build_problem()
    except ConfigError as e:
        _fail_config(str(e))

    states = asyncio.run(run_experiments(configs))

    failed = False
    rows = {}
    violations = 0
    for config in configs:
        state = states[config.name]
        for err in state.get("errors") or []:
            console.print(f"[red]{config.name}: {err['stage']} failed:[/red] {err['error']}")
            failed = True
        if "certificate" in state:
            render_certificate(config.name, state["certificate"], console)
            violations += state["certificate"].violations
        if "curve" in state:
            label = config.instance.regularization  # type: ignore[union-attr]
            rows[label] = report_row(label, state["reg"].alphas, state["curve"])
    if failed:
        raise typer.Exit(EXIT_FAILURE)

    try:
        report = emit_report(rows)
    except ReportError as e:
        console.print(f"[red]Report check failed:[/red] {e}")
        raise typer.Exit(EXIT_REPORT_ORDER)

    render_report(report, console)
    root = output_dir or RuntimeSettings.default().output_dir
    path = write_atomic(Path(root) / f"report-seed{seed}" / "report.csv", report.to_csv())
    console.print(f"  report: {path}")
    if violations:
        raise typer.Exit(EXIT_VIOLATIONS)


if __name__ == "__main__":
    app()
