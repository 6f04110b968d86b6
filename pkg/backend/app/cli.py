"""Command-line experiment runner.

Exit codes: 0 everything passed, 1 a trend assertion failed or the oracle
found a counterexample, 2 the configuration or the inputs are unusable.
"""

import json
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import sentry_sdk
import typer

from app.core.config import settings
from app.core.errors import ConfigurationError, ReportInputError
from app.services.engine import run
from app.services.experiments import PRESETS, cmd_run, cmd_sweep, parse_config
from app.services.oracle import check_trace, describe, load_trace, write_trace
from app.services.report import cmd_report, load_assertions, render_report, write_report

logger = logging.getLogger(__name__)

EXIT_FAILED = 1
EXIT_CONFIG = 2

app = typer.Typer(
    name="mcdsim",
    help="Simulate push-based multi-channel dissemination and check the trends.",
    no_args_is_help=True,
)

ConfigOption = Annotated[
    Path, typer.Option("--config", "-c", help="JSON experiment file", show_default=False)
]
OutOption = Annotated[Path | None, typer.Option("--out", "-o", help="output directory")]


@app.callback()
def main() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL)
    if settings.sentry_enabled:
        sentry_sdk.init(dsn=str(settings.SENTRY_DSN))


@contextmanager
def _exit_on_bad_input() -> Iterator[None]:
    try:
        yield
    except (ConfigurationError, ReportInputError) as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(code=EXIT_CONFIG)


def _split_values(raw: str) -> list[Any]:
    values: list[Any] = []
    for token in (part.strip() for part in raw.split(",")):
        if not token:
            continue
        try:
            values.append(json.loads(token))
        except json.JSONDecodeError:
            values.append(token)
    return values


def _split_seeds(raw: str | None) -> list[int] | None:
    if raw is None:
        return None
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"seeds must be integers, got {raw!r}", fields=["seeds"])


@app.command("run")
def run_command(
    config: ConfigOption,
    seed: Annotated[int | None, typer.Option(help="run this seed only")] = None,
    out: OutOption = None,
) -> None:
    """Run the configured protocols and seeds without sweeping."""
    with _exit_on_bad_input():
        spec = parse_config(config, seeds=[seed] if seed is not None else None, output_dir=out)
        spec = spec.model_copy(update={"sweep_param": None, "sweep_values": []})
        result = cmd_run(spec)
    for summary in result.summaries:
        typer.echo(
            f"{summary.protocol.value:8} seed={summary.seed:<4} rt={summary.rt_mean:.2f} "
            f"pc={summary.pc_mean:.2f} so={summary.so_per_cycle:.2f} "
            f"commits={summary.commits}/{summary.mts_total}"
        )
    typer.echo(f"results in {spec.output_dir}")


@app.command("sweep")
def sweep_command(
    config: ConfigOption,
    preset: Annotated[
        str | None, typer.Option(help=f"one of {', '.join(sorted(PRESETS))}")
    ] = None,
    param: Annotated[str | None, typer.Option(help="SimConfig field to sweep")] = None,
    values: Annotated[str | None, typer.Option(help="comma-separated sweep values")] = None,
    seeds: Annotated[str | None, typer.Option(help="comma-separated seeds")] = None,
    out: OutOption = None,
) -> None:
    """Sweep one parameter over protocols and seeds, writing CSV and plot data."""
    with _exit_on_bad_input():
        if preset and param:
            raise ConfigurationError("use either --preset or --param, not both", fields=["param"])
        if param and not values:
            raise ConfigurationError("--param needs --values", fields=["values"])
        spec = parse_config(
            config,
            preset=preset,
            sweep_param=param,
            sweep_values=_split_values(values) if values else None,
            seeds=_split_seeds(seeds),
            output_dir=out,
        )
        cmd_sweep(spec)
    typer.echo(f"{spec.planned_runs} runs written to {spec.output_dir}")


@app.command("report")
def report_command(
    in_dir: Annotated[Path, typer.Option("--in", help="directory a sweep wrote")],
    assertions: Annotated[
        Path | None, typer.Option("--assert", help="JSON list of extra trend assertions")
    ] = None,
    preset: Annotated[str | None, typer.Option(help="built-in suite to apply")] = None,
) -> None:
    """Check the trend assertions against the sweep CSVs."""
    with _exit_on_bad_input():
        extra = load_assertions(assertions) if assertions else []
        outcome = cmd_report(in_dir, extra, preset=preset)
        write_report(outcome)
    typer.echo(render_report(outcome))
    if not outcome.passed:
        raise typer.Exit(code=EXIT_FAILED)


@app.command("trace")
def trace_command(
    config: ConfigOption,
    out: Annotated[Path, typer.Option("--out", "-o", help="trace file (JSON lines)")],
    check: Annotated[bool, typer.Option(help="run the serializability oracle")] = False,
) -> None:
    """Write the full event trace of one run."""
    with _exit_on_bad_input():
        spec = parse_config(config)
        result = run(spec.base.model_copy(update={"trace": True}))
    out.parent.mkdir(parents=True, exist_ok=True)
    count = write_trace(result.trace, out)
    typer.echo(f"{count} trace records written to {out}")
    if check:
        with _exit_on_bad_input():
            verdict = check_trace(load_trace(out), spec.base.protocol)
        typer.echo(describe(verdict))
        if not verdict.passed:
            raise typer.Exit(code=EXIT_FAILED)


@app.command("presets")
def presets_command() -> None:
    """List the built-in figure sweeps."""
    for name, preset in sorted(PRESETS.items()):
        values = ", ".join(str(v) for v in preset.sweep_values)
        typer.echo(f"{name}: {preset.description} ({preset.sweep_param} = {values})")


if __name__ == "__main__":
    app()
