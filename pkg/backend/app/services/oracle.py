"""Brute-force serializability check of a finished run.

Every committed MT must have read a state the database actually passed
through: some snapshot of the version history where each item it read held
exactly the value it saw. Snapshots are taken at cycle boundaries or, for
the fresh broadcast which has no cycle snapshot, after every commit.
"""

from __future__ import annotations

import json
import logging
from bisect import bisect_right
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from pydantic import ValidationError

from app.core.errors import InvariantViolation, ReportInputError
from app.models import ProtocolId, TraceRecord
from app.services.engine import RunResult
from app.services.server import CP_WRITER, VersionRecord

logger = logging.getLogger(__name__)


class Granularity(str, Enum):
    CYCLE = "cycle"
    COMMIT = "commit"


def default_granularity(protocol: ProtocolId) -> Granularity:
    return Granularity.COMMIT if protocol is ProtocolId.FRESH else Granularity.CYCLE


@dataclass(frozen=True)
class CommittedMt:
    txn_id: str
    reads: tuple[tuple[int, int], ...]
    writes: tuple[tuple[int, int], ...] = ()
    local: bool = True


@dataclass(frozen=True)
class Counterexample:
    txn_id: str
    reads: tuple[tuple[int, int], ...]
    reason: str


@dataclass(frozen=True)
class OracleResult:
    granularity: Granularity
    checked: int
    counterexample: Counterexample | None = None

    @property
    def passed(self) -> bool:
        return self.counterexample is None


class VersionIndex:
    """Value of every item at any cycle boundary or commit prefix."""

    def __init__(self, history: Mapping[int, Sequence[VersionRecord]]) -> None:
        self._versions = {
            item_id: sorted(records, key=lambda r: r.seq) for item_id, records in history.items()
        }
        self._cycles = {i: [r.cycle for r in rs] for i, rs in self._versions.items()}
        self._seqs = {i: [r.seq for r in rs] for i, rs in self._versions.items()}

    def points(self, granularity: Granularity) -> range:
        keys = self._cycles if granularity is Granularity.CYCLE else self._seqs
        last = max((k[-1] for k in keys.values() if k), default=0)
        return range(0, last + 1)

    def value_at(self, item_id: int, point: int, granularity: Granularity) -> int:
        records = self._versions.get(item_id)
        if not records:
            return 0
        keys = self._cycles[item_id] if granularity is Granularity.CYCLE else self._seqs[item_id]
        position = bisect_right(keys, point) - 1
        return records[position].value if position >= 0 else 0

    def written_by(self, txn_id: str, item_id: int, value: int) -> VersionRecord:
        matches = [
            r
            for r in self._versions.get(item_id, [])
            if r.writer == txn_id and r.value == value
        ]
        if len(matches) != 1:
            raise InvariantViolation(
                f"{txn_id} committed {item_id}={value} but the history holds "
                f"{len(matches)} matching versions"
            )
        return matches[0]

    def snapshot(self, point: int, granularity: Granularity) -> dict[int, int]:
        return {i: self.value_at(i, point, granularity) for i in sorted(self._versions)}


def _matches(
    index: VersionIndex, reads: Iterable[tuple[int, int]], point: int, granularity: Granularity
) -> bool:
    return all(index.value_at(item, point, granularity) == value for item, value in reads)


def serializability_oracle(
    mts: Iterable[CommittedMt],
    history: Mapping[int, Sequence[VersionRecord]],
    *,
    granularity: Granularity = Granularity.CYCLE,
) -> OracleResult:
    """Search the snapshots for one matching each MT; stop at the first failure.

    Locally committed read-only MTs are matched at ``granularity``. MTs the CP
    validated were compared against its live state, so they are matched
    against commit prefixes; one that wrote must match the prefix just
    before its own writes and must have written read value + 1.
    """
    index = VersionIndex(history)
    checked = 0
    for mt in mts:
        checked += 1
        reads = dict(mt.reads)
        if mt.writes:
            write_seqs = []
            for item_id, value in mt.writes:
                if reads.get(item_id) != value - 1:
                    return OracleResult(
                        granularity,
                        checked,
                        Counterexample(
                            mt.txn_id,
                            mt.reads,
                            f"wrote {item_id}={value} after reading {reads.get(item_id)}",
                        ),
                    )
                write_seqs.append(index.written_by(mt.txn_id, item_id, value).seq)
            point = min(write_seqs) - 1
            if not _matches(index, mt.reads, point, Granularity.COMMIT):
                return OracleResult(
                    granularity,
                    checked,
                    Counterexample(
                        mt.txn_id,
                        mt.reads,
                        f"reads differ from the state before commit {point + 1}",
                    ),
                )
            continue

        level = granularity if mt.local else Granularity.COMMIT
        if not any(_matches(index, mt.reads, p, level) for p in index.points(level)):
            return OracleResult(
                granularity,
                checked,
                Counterexample(mt.txn_id, mt.reads, f"no {level.value} snapshot matches"),
            )
    logger.debug("oracle checked %d MTs at %s granularity", checked, granularity.value)
    return OracleResult(granularity, checked)


def check_run(result: RunResult, granularity: Granularity | None = None) -> OracleResult:
    mts = [
        CommittedMt(
            txn_id=sample.txn_id, reads=sample.reads, writes=sample.writes, local=sample.local
        )
        for sample in result.samples
    ]
    return serializability_oracle(
        mts,
        result.history,
        granularity=granularity or default_granularity(result.config.protocol),
    )


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------
def write_trace(records: Iterable[TraceRecord], path: Path) -> int:
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json())
            handle.write("\n")
            count += 1
    return count


def load_trace(path: Path) -> list[TraceRecord]:
    records: list[TraceRecord] = []
    with path.open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.model_validate_json(line))
            except ValidationError as e:
                raise ReportInputError(f"{path}:{number} is not a trace record") from e
    return records


def history_from_trace(records: Iterable[TraceRecord]) -> dict[int, list[VersionRecord]]:
    history: dict[int, list[VersionRecord]] = {}
    for record in records:
        if record.event != "UPDATE":
            continue
        f = record.fields
        item_id = int(f["item"])
        history.setdefault(item_id, [VersionRecord(item_id=item_id, cycle=0, value=0, seq=0)])
        history[item_id].append(
            VersionRecord(
                item_id=item_id,
                cycle=int(f["cycle"]),
                value=int(f["value"]),
                seq=int(f["seq"]),
                writer=str(f.get("writer", CP_WRITER)),
            )
        )
    return history


def mts_from_trace(records: Iterable[TraceRecord]) -> list[CommittedMt]:
    return [
        CommittedMt(
            txn_id=str(record.fields["txn"]),
            reads=tuple((int(i), int(v)) for i, v in record.fields.get("reads", [])),
            writes=tuple((int(i), int(v)) for i, v in record.fields.get("writes", [])),
            local=bool(record.fields.get("local", True)),
        )
        for record in records
        if record.event == "COMMIT"
    ]


def check_trace(records: Sequence[TraceRecord], protocol: ProtocolId) -> OracleResult:
    return serializability_oracle(
        mts_from_trace(records),
        history_from_trace(records),
        granularity=default_granularity(protocol),
    )


def describe(result: OracleResult) -> str:
    if result.counterexample is None:
        return f"PASS: {result.checked} committed MTs serializable ({result.granularity.value})"
    ce = result.counterexample
    return f"COUNTEREXAMPLE {ce.txn_id}: reads {json.dumps(ce.reads)}: {ce.reason}"
