"""Raw per-MT and per-cycle samples and the aggregates computed from them."""

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from app.models import ProtocolId, RunSummary


@dataclass(frozen=True)
class MtSample:
    client_id: int
    txn_id: str
    protocol: ProtocolId
    created_tick: int
    committed_tick: float
    rt: float
    pc_listen: float
    pc_check: float
    pc_tx: float
    pc_control: float
    pc: float
    awake_ticks: float
    restarts: int
    rereads: int
    validations: int
    checks: int
    rs_size: int
    ws_size: int
    local: bool
    reads: tuple[tuple[int, int], ...] = ()
    writes: tuple[tuple[int, int], ...] = ()

    def row(self) -> dict[str, Any]:
        data = asdict(self)
        data["protocol"] = self.protocol.value
        data["reads"] = " ".join(f"{item}:{value}" for item, value in self.reads)
        data["writes"] = " ".join(f"{item}:{value}" for item, value in self.writes)
        return data


@dataclass
class CycleSample:
    """Units one channel spent in one cycle (one pass under fresh)."""

    channel: int
    cycle: int
    start_tick: int
    length: int
    control_units: int
    payload_units: int
    interrupt_retx_units: int = 0
    busy_units: int = 0
    n_items: int = 0

    @property
    def frame_units(self) -> int:
        return self.control_units + self.payload_units + self.interrupt_retx_units

    @property
    def idle_units(self) -> int:
        return self.length - self.busy_units

    @property
    def space_overhead(self) -> int:
        return self.control_units + self.interrupt_retx_units

    def row(self) -> dict[str, Any]:
        data = asdict(self)
        data["idle_units"] = self.idle_units
        data["so_units"] = self.space_overhead
        return data


def _mean(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else float("nan")


def _p95(values: np.ndarray) -> float:
    return float(np.percentile(values, 95)) if values.size else float("nan")


@dataclass
class MetricsRecord:
    protocol: ProtocolId
    seed: int
    mts_total: int = 0
    rejections: int = 0
    mt_samples: list[MtSample] = field(default_factory=list)
    cycle_samples: list[CycleSample] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(sample, name) for sample in self.mt_samples], dtype=np.float64)

    def summary(self, *, sweep_param: str = "", sweep_value: float | str = "") -> RunSummary:
        so = np.array([c.space_overhead for c in self.cycle_samples], dtype=np.float64)
        lengths = np.array([c.length for c in self.cycle_samples], dtype=np.float64)
        rt = self.column("rt")
        return RunSummary(
            protocol=self.protocol,
            seed=self.seed,
            sweep_param=sweep_param,
            sweep_value=sweep_value,
            rt_mean=_mean(rt),
            rt_p95=_p95(rt),
            pc_mean=_mean(self.column("pc")),
            pc_listen=_mean(self.column("pc_listen")),
            pc_check=_mean(self.column("pc_check")),
            pc_tx=_mean(self.column("pc_tx")),
            pc_control=_mean(self.column("pc_control")),
            so_per_cycle=_mean(so),
            cycle_length_mean=_mean(lengths),
            commits=len(self.mt_samples),
            local_commits=sum(sample.local for sample in self.mt_samples),
            rejections=self.rejections,
            rereads=sum(sample.rereads for sample in self.mt_samples),
            restarts=sum(sample.restarts for sample in self.mt_samples),
            mts_total=self.mts_total,
            mts_committed=len(self.mt_samples),
            cycles=len({c.cycle for c in self.cycle_samples}),
        )
