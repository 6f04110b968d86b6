"""Experiment files, the built-in figure presets, sweep execution and the
CSV / plot-data files a sweep leaves behind."""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import pandas as pd
from pydantic import BaseModel, ValidationError

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.models import (
    RESULT_COLUMNS,
    ExperimentSpec,
    PresetPublic,
    ProtocolId,
    RunPublic,
    RunSummary,
    SimConfig,
    SweepBlock,
)
from app.services.engine import run

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

META_KEYS = {"sweep", "preset", "output_dir"}
PLOT_METRICS = ("rt_mean", "pc_mean", "so_per_cycle", "pc_listen", "pc_check", "pc_control")

RESULTS_FILE = "results.csv"
SAMPLES_FILE = "samples.csv"
CYCLES_FILE = "cycles.csv"
CONFIG_FILE = "config.json"


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    sweep_param: str
    sweep_values: tuple[Any, ...]
    overrides: Mapping[str, Any]
    protocols: tuple[ProtocolId, ...] = tuple(ProtocolId)
    seeds: tuple[int, ...] = (1, 2, 3)

    def public(self) -> PresetPublic:
        return PresetPublic(
            name=self.name,
            description=self.description,
            sweep_param=self.sweep_param,
            sweep_values=list(self.sweep_values),
            protocols=list(self.protocols),
            overrides=dict(self.overrides),
        )


# Each client runs three MTs back to back, so every MT after the first arrives
# mid-cycle and its reads can straddle a cycle boundary where updates land.
_SIZE_SWEEP = {
    "n_items": 100,
    "n_channels": 1,
    "n_clients": 20,
    "mts_per_client": 3,
    "arrival": "start",
    "rs_min": 4,
    "rs_max": 4,
    "write_prob": 0.0,
    "update_rate": 0.2,
    "horizon_cycles": 20,
}

PRESETS: dict[str, Preset] = {
    preset.name: preset
    for preset in (
        Preset(
            name="fig2",
            description="Decision (checking) cost against response time",
            sweep_param="check_cost",
            sweep_values=(0.0, 0.5, 1.0, 2.0, 4.0),
            overrides={
                "n_items": 100,
                "n_channels": 1,
                "n_clients": 10,
                "mts_per_client": 1,
                "arrival": "start",
                "rs_min": 1,
                "rs_max": 4,
                "write_prob": 0.0,
                "update_rate": 0.1,
                "horizon_cycles": 10,
            },
        ),
        Preset(
            name="fig3",
            description="Item size against power consumption",
            sweep_param="item_size",
            sweep_values=(16, 64, 256, 1024),
            overrides=_SIZE_SWEEP,
        ),
        Preset(
            name="fig4",
            description="Item size against space overhead",
            sweep_param="item_size",
            sweep_values=(16, 64, 256, 1024),
            overrides=_SIZE_SWEEP,
        ),
        Preset(
            name="fig5",
            description="Position of a single read item in the cycle against power consumption",
            sweep_param="rs_position",
            sweep_values=(1, 10, 25, 50, 100),
            overrides={
                "n_items": 100,
                "n_channels": 1,
                "n_clients": 4,
                "mts_per_client": 1,
                "arrival": "start",
                "rs_min": 1,
                "rs_max": 1,
                "write_prob": 0.0,
                "update_rate": 0.0,
                "horizon_cycles": 3,
            },
        ),
    )
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose one of {', '.join(sorted(PRESETS))}",
            fields=["preset"],
        ) from None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------
def _error_fields(error: ValidationError, prefix: str = "") -> list[str]:
    fields = []
    for detail in error.errors():
        loc = ".".join(str(part) for part in detail["loc"])
        fields.append(f"{prefix}{loc}" if loc else prefix.rstrip(".") or "config")
    return fields


def _validate(model: type[ModelT], data: Any, prefix: str = "") -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(
            f"invalid {model.__name__}: {e.errors()[0]['msg']}",
            fields=_error_fields(e, prefix),
        ) from e


def build_spec(
    document: Mapping[str, Any],
    *,
    preset: str | None = None,
    sweep_param: str | None = None,
    sweep_values: Sequence[Any] | None = None,
    seeds: Sequence[int] | None = None,
    output_dir: Path | None = None,
) -> ExperimentSpec:
    """Resolve one experiment from a config document and command-line choices.

    A preset fixes its own workload keys and sweep; the document supplies
    everything else. Explicit arguments win over the document's sweep block.
    """
    data = {key: value for key, value in document.items() if key not in META_KEYS}
    sweep = _validate(SweepBlock, document["sweep"], "sweep.") if "sweep" in document else None
    preset_name = preset or document.get("preset")

    param = sweep.param if sweep else None
    values: list[Any] = list(sweep.values) if sweep else []
    protocols: list[ProtocolId] | None = None
    if sweep and sweep.protocols:
        protocols = list(sweep.protocols)
    seed_list: list[int] | None = list(sweep.seeds) if sweep and sweep.seeds else None

    if preset_name is not None:
        chosen = get_preset(preset_name)
        data = {**data, **chosen.overrides}
        data.setdefault("protocol", chosen.protocols[0].value)
        data.setdefault("seed", chosen.seeds[0])
        param, values = chosen.sweep_param, list(chosen.sweep_values)
        protocols = protocols or list(chosen.protocols)
        seed_list = seed_list or list(chosen.seeds)
    if sweep_param is not None:
        param, values = sweep_param, list(sweep_values or [])

    base = _validate(SimConfig, data)
    try:
        return ExperimentSpec(
            base=base,
            sweep_param=param,
            sweep_values=values,
            protocols=protocols or [base.protocol],
            seeds=list(seeds) if seeds else seed_list or [base.seed],
            output_dir=output_dir or Path(document.get("output_dir") or settings.OUTPUT_DIR),
            preset=preset_name,
        )
    except ValidationError as e:
        raise ConfigurationError(
            f"invalid experiment: {e.errors()[0]['msg']}", fields=_error_fields(e, "sweep.")
        ) from e


def parse_config(path: Path, **overrides: Any) -> ExperimentSpec:
    """Read a JSON experiment file; every problem names the offending key."""
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist", fields=["config"]) from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}", fields=["config"]) from e
    if not isinstance(document, dict):
        raise ConfigurationError(f"{path} must hold a JSON object", fields=["config"])
    return build_spec(document, **overrides)


# ---------------------------------------------------------------------------
# Planning and execution
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PlannedRun:
    config: SimConfig
    sweep_param: str = ""
    sweep_value: Any = ""


@dataclass(frozen=True)
class RunArtifacts:
    summary: RunSummary
    samples: list[dict[str, Any]]
    cycles: list[dict[str, Any]]


def plan_runs(spec: ExperimentSpec) -> list[PlannedRun]:
    """Cartesian product sweep value x protocol x seed, in that nesting order."""
    base = spec.base.model_dump()
    points: list[Any] = spec.sweep_values if spec.sweep_param else [None]
    plans = []
    for value, protocol, seed in itertools.product(points, spec.protocols, spec.seeds):
        data = {**base, "protocol": protocol, "seed": seed}
        if spec.sweep_param:
            data[spec.sweep_param] = value
        config = _validate(SimConfig, data)
        if spec.sweep_param:
            plans.append(
                PlannedRun(config, spec.sweep_param, getattr(config, spec.sweep_param))
            )
        else:
            plans.append(PlannedRun(config))
    return plans


def execute_run(plan: PlannedRun) -> RunArtifacts:
    result = run(plan.config)
    summary = result.metrics.summary(sweep_param=plan.sweep_param, sweep_value=plan.sweep_value)
    tags = {
        "seed": plan.config.seed,
        "sweep_param": plan.sweep_param,
        "sweep_value": plan.sweep_value,
    }
    samples = [{**tags, **sample.row()} for sample in result.metrics.mt_samples]
    cycles = [
        {"protocol": plan.config.protocol.value, **tags, **cycle.row()}
        for cycle in result.metrics.cycle_samples
    ]
    return RunArtifacts(summary=summary, samples=samples, cycles=cycles)


@dataclass
class ExperimentResult:
    summaries: list[RunSummary] = field(default_factory=list)
    samples: list[dict[str, Any]] = field(default_factory=list)
    cycles: list[dict[str, Any]] = field(default_factory=list)

    def results_frame(self) -> pd.DataFrame:
        rows = [summary.model_dump(mode="json") for summary in self.summaries]
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)


def run_experiment(spec: ExperimentSpec, *, workers: int | None = None) -> ExperimentResult:
    plans = plan_runs(spec)
    workers = workers or settings.SWEEP_WORKERS
    logger.info("running %d planned runs on %d worker(s)", len(plans), workers)
    if workers > 1 and len(plans) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            artifacts = list(pool.map(execute_run, plans))
    else:
        artifacts = [execute_run(plan) for plan in plans]
    result = ExperimentResult()
    for item in artifacts:
        result.summaries.append(item.summary)
        result.samples.extend(item.samples)
        result.cycles.extend(item.cycles)
    return result


def run_single(config: SimConfig) -> RunPublic:
    result = run(config)
    return RunPublic(
        summary=result.metrics.summary(),
        samples=len(result.metrics.mt_samples),
        cycles=len(result.metrics.cycle_samples),
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------
def plot_frame(results: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Seed-averaged ``metric``, one row per sweep value, one column per protocol."""
    table = results.pivot_table(
        index="sweep_value", columns="protocol", values=metric, aggfunc="mean", sort=True
    )
    table.columns = [str(column) for column in table.columns]
    return table.reset_index()


def write_outputs(result: ExperimentResult, spec: ExperimentSpec, out_dir: Path) -> list[Path]:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        results = result.results_frame()
        written = [out_dir / RESULTS_FILE, out_dir / SAMPLES_FILE, out_dir / CYCLES_FILE]
        results.to_csv(written[0], index=False, na_rep="")
        pd.DataFrame(result.samples).to_csv(written[1], index=False, na_rep="")
        pd.DataFrame(result.cycles).to_csv(written[2], index=False, na_rep="")
        (out_dir / CONFIG_FILE).write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
        written.append(out_dir / CONFIG_FILE)
        if spec.sweep_param and not results.empty:
            for metric in PLOT_METRICS:
                path = out_dir / f"plot_{metric}.dat"
                plot = plot_frame(results, metric).rename(columns={"sweep_value": spec.sweep_param})
                plot.to_csv(path, sep=" ", index=False, na_rep="nan")
                written.append(path)
    except OSError as e:
        raise ConfigurationError(
            f"cannot write results to {out_dir}: {e}", fields=["output_dir"]
        ) from e
    logger.info("wrote %d files to %s", len(written), out_dir)
    return written


def cmd_run(spec: ExperimentSpec, out_dir: Path | None = None) -> ExperimentResult:
    result = run_experiment(spec)
    write_outputs(result, spec, out_dir or spec.output_dir)
    return result


def cmd_sweep(spec: ExperimentSpec, out_dir: Path | None = None) -> ExperimentResult:
    if not spec.sweep_param:
        raise ConfigurationError("a sweep needs a parameter and values", fields=["sweep"])
    return cmd_run(spec, out_dir)
