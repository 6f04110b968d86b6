import math
from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self


class ProtocolId(str, Enum):
    MCD = "mcd"
    FRESH = "fresh"
    NXN = "nxn"
    PERFECT = "perfect"


# Shared simulation parameters; one run is fully determined by these values
class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    protocol: ProtocolId
    n_items: int = Field(ge=1, le=100_000)
    seed: int = Field(ge=0)

    # Database and channels
    item_size: int = Field(default=16, ge=1)
    item_sizes: list[int] | None = None
    n_channels: int = Field(default=1, ge=1)
    channel_strategy: Literal["round_robin", "block"] = "round_robin"
    items_per_cycle: int | None = Field(default=None, ge=1)
    dissemination_fraction: float = Field(default=1.0, gt=0.0, le=1.0)

    # Workload
    n_clients: int = Field(default=10, ge=1)
    mts_per_client: int = Field(default=1, ge=1)
    arrival: Literal["start", "poisson"] = "start"
    mean_interarrival_ticks: float = Field(default=100.0, gt=0.0)
    rs_min: int = Field(default=1, ge=1)
    rs_max: int = Field(default=4, ge=1)
    access: Literal["uniform", "zipf"] = "uniform"
    zipf_theta: float = Field(default=0.8, ge=0.0)
    rs_position: int | None = Field(default=None, ge=1)
    write_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    update_rate: float = Field(default=0.1, ge=0.0, le=1.0)

    # Client cost model
    check_cost: float = Field(default=0.1, ge=0.0)
    p_listen: float = Field(default=1.0, ge=0.0)
    p_tx: float = Field(default=5.0, ge=0.0)
    count_tx_energy: bool = True
    single_tuner: bool = False

    # Frame layout, in transmission units
    header_units: int = Field(default=2, ge=1)
    entry_units: int = Field(default=2, ge=1)
    fresh_header_units: int = Field(default=1, ge=0)
    cell_bits: int = Field(default=1, ge=1)
    unit_bits: int = Field(default=32, ge=1)

    # Backchannel and validation
    backchannel_latency: int = Field(default=10, ge=0)
    validation_ticks: int = Field(default=1, ge=1)
    lock_timeout_cycles: float = Field(default=2.0, gt=0.0)

    # Run control
    horizon_cycles: int | None = Field(default=50, ge=0)
    horizon_ticks: int | None = Field(default=None, ge=0)
    trace: bool = False
    check_invariants: bool = True

    @model_validator(mode="after")
    def _check_consistency(self) -> Self:
        if self.rs_min > self.rs_max:
            raise ValueError("rs_min must not exceed rs_max")
        if self.rs_max > self.n_items:
            raise ValueError("rs_max must not exceed n_items")
        if self.n_channels > self.n_items:
            raise ValueError("n_channels must not exceed n_items")
        if self.item_sizes is not None:
            if len(self.item_sizes) != self.n_items:
                raise ValueError("item_sizes must list exactly n_items sizes")
            if any(size < 1 for size in self.item_sizes):
                raise ValueError("item_sizes entries must be at least 1")
        if self.protocol == ProtocolId.FRESH and self.write_prob > 0:
            raise ValueError(
                "write_prob must be 0 for protocol fresh: "
                "in the fresh approach, the user is read-only"
            )
        if self.protocol == ProtocolId.FRESH and self.n_channels > 1:
            raise ValueError(
                "n_channels must be 1 for protocol fresh: "
                "updates are ordered per channel, not across channels"
            )
        if self.horizon_cycles is None and self.horizon_ticks is None:
            raise ValueError("one of horizon_cycles or horizon_ticks is required")
        if self.rs_position is not None:
            first_group = math.ceil(self.n_items / self.n_channels)
            limit = min(first_group, self.items_per_cycle or first_group)
            if self.rs_position > limit:
                raise ValueError(
                    f"rs_position must lie within the channel 0 cycle (1..{limit})"
                )
        return self

    def size_of(self, item_id: int) -> int:
        if self.item_sizes is not None:
            return self.item_sizes[item_id]
        return self.item_size


SWEEPABLE_EXCLUDED = {"protocol", "seed"}


class SweepBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    param: str
    values: list[Any] = Field(min_length=1)
    protocols: list[ProtocolId] | None = None
    seeds: list[int] | None = None


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: SimConfig
    sweep_param: str | None = None
    sweep_values: list[Any] = Field(default_factory=list)
    protocols: list[ProtocolId] = Field(min_length=1)
    seeds: list[int] = Field(min_length=1)
    output_dir: Path = Path("results")
    preset: str | None = None

    @model_validator(mode="after")
    def _check_sweep(self) -> Self:
        if self.sweep_param is None:
            if self.sweep_values:
                raise ValueError("sweep values given without a sweep parameter")
            return self
        if self.sweep_param not in SimConfig.model_fields:
            raise ValueError(f"sweep parameter {self.sweep_param!r} is not a SimConfig field")
        if self.sweep_param in SWEEPABLE_EXCLUDED:
            raise ValueError(f"{self.sweep_param!r} is swept through the protocols/seeds lists")
        if not self.sweep_values:
            raise ValueError("a sweep needs at least one value")
        base = self.base.model_dump()
        for value in self.sweep_values:
            SimConfig.model_validate({**base, self.sweep_param: value})
        return self

    @property
    def planned_runs(self) -> int:
        points = len(self.sweep_values) if self.sweep_param else 1
        return points * len(self.protocols) * len(self.seeds)


class TrendKind(str, Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    CONSTANT = "constant"
    DOMINATES = "dominates"
    LINEAR_FIT = "linear_fit"
    WITHIN_FACTOR = "within_factor"
    CONSTANT_DIFFERENCE = "constant_difference"


PAIRWISE_KINDS = {
    TrendKind.DOMINATES,
    TrendKind.WITHIN_FACTOR,
    TrendKind.CONSTANT_DIFFERENCE,
}


class TrendAssertion(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    kind: TrendKind
    metric: str
    # Column equality filter applied before grouping, e.g. {"protocol": "fresh"}
    filter: dict[str, str | int | float] = Field(default_factory=dict)
    a: ProtocolId | None = None
    b: ProtocolId | None = None
    tol: float = Field(default=0.01, ge=0.0)
    factor: float = Field(default=1.0, gt=0.0)
    offset: float = 0.0
    offset_metric: str | None = None
    min_r2: float = Field(default=0.99, ge=0.0, le=1.0)
    denominator: str | None = None

    @model_validator(mode="after")
    def _check_operands(self) -> Self:
        if self.kind in PAIRWISE_KINDS and (self.a is None or self.b is None):
            raise ValueError(f"{self.kind.value} assertions need both a and b")
        return self


class AssertionResult(BaseModel):
    name: str
    kind: TrendKind
    metric: str
    passed: bool
    evidence: str
    points: list[dict[str, float | str]] = Field(default_factory=list)


# One CSV row per (run, aggregate)
class RunSummary(BaseModel):
    protocol: ProtocolId
    seed: int
    sweep_param: str = ""
    sweep_value: float | str = ""
    rt_mean: float
    rt_p95: float
    pc_mean: float
    pc_listen: float
    pc_check: float
    pc_tx: float
    pc_control: float
    so_per_cycle: float
    cycle_length_mean: float
    commits: int
    local_commits: int
    rejections: int
    rereads: int
    restarts: int
    mts_total: int
    mts_committed: int
    cycles: int


RESULT_COLUMNS = list(RunSummary.model_fields)


class RunPublic(BaseModel):
    summary: RunSummary
    samples: int
    cycles: int


class PresetPublic(BaseModel):
    name: str
    description: str
    sweep_param: str
    sweep_values: list[Any]
    protocols: list[ProtocolId]
    overrides: dict[str, Any]


class PresetsPublic(BaseModel):
    data: list[PresetPublic]
    count: int


# Generic message
class Message(BaseModel):
    message: str


# One JSON line of a run trace
class TraceRecord(BaseModel):
    tick: int | float
    actor: str
    event: str
    fields: dict[str, Any] = Field(default_factory=dict)
