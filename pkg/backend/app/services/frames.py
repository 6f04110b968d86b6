"""Items, dissemination cycle frames and the index-based consistency test.

Everything here is a plain value or a pure function. Sizes, offsets and
lengths are expressed in transmission units (one unit per tick per channel).
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

from app.core.errors import ProtocolViolation


@dataclass(frozen=True)
class DataItem:
    id: int
    size: int
    value: int = 0
    last_updated_cycle: int = 0
    last_disseminated_cycle: int = 0


@dataclass(frozen=True)
class IndexEntry:
    item_id: int
    offset: int
    size: int
    last_updated_cycle: int
    updated_flag: bool

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class CycleFrame:
    """One dissemination transaction: header, control block and item payloads.

    ``index`` always describes the payload layout in transmission order.
    ``index_length`` is what the control block actually costs on the air:
    the per-item entries for MCD, the n x n matrix for nxn, nothing for
    Perfect. ``values`` are the item values carried by the payloads, in
    index order, as of the moment the frame was built.
    """

    channel: int
    cycle: int
    index: tuple[IndexEntry, ...]
    values: tuple[int, ...]
    payload_length: int
    header_length: int
    index_length: int

    @property
    def control_length(self) -> int:
        return self.header_length + self.index_length

    @property
    def length(self) -> int:
        return self.header_length + self.index_length + self.payload_length

    @property
    def item_ids(self) -> tuple[int, ...]:
        return tuple(entry.item_id for entry in self.index)

    @cached_property
    def _positions(self) -> dict[int, int]:
        return {entry.item_id: pos for pos, entry in enumerate(self.index)}

    def position_of(self, item_id: int) -> int | None:
        return self._positions.get(item_id)

    def value_of(self, item_id: int) -> int | None:
        pos = self._positions.get(item_id)
        return None if pos is None else self.values[pos]

    def stamps(self) -> dict[int, int]:
        return {entry.item_id: entry.last_updated_cycle for entry in self.index}

    def item_start(self, entry: IndexEntry, frame_start: int) -> int:
        """Absolute tick of the first payload unit of ``entry``."""
        return frame_start + self.control_length + entry.offset


class TxnState(str, Enum):
    PENDING = "pending"
    LISTENING = "listening"
    VALIDATING = "validating"
    REREADING = "rereading"
    COMMITTED = "committed"
    ABORTED = "aborted"


# Validating -> Listening is the full restart taken by nxn after a rejection
_TRANSITIONS: dict[TxnState, frozenset[TxnState]] = {
    TxnState.PENDING: frozenset({TxnState.LISTENING}),
    TxnState.LISTENING: frozenset(
        {TxnState.LISTENING, TxnState.COMMITTED, TxnState.VALIDATING, TxnState.ABORTED}
    ),
    TxnState.VALIDATING: frozenset(
        {TxnState.COMMITTED, TxnState.REREADING, TxnState.LISTENING, TxnState.ABORTED}
    ),
    TxnState.REREADING: frozenset({TxnState.LISTENING, TxnState.ABORTED}),
    TxnState.COMMITTED: frozenset(),
    TxnState.ABORTED: frozenset(),
}


@dataclass(frozen=True)
class Observation:
    value: int
    update_cycle: int
    read_cycle: int
    channel: int
    read_tick: float


@dataclass
class MobileTransaction:
    txn_id: str
    client_id: int
    read_set: frozenset[int]
    write_items: frozenset[int] = frozenset()
    state: TxnState = TxnState.PENDING
    created_tick: int = 0
    committed_tick: float | None = None
    observed: dict[int, Observation] = field(default_factory=dict)
    restarts: int = 0
    rereads: int = 0
    validations: int = 0
    checks: int = 0
    committed_locally: bool = False

    def __post_init__(self) -> None:
        if not self.read_set:
            raise ProtocolViolation(f"{self.txn_id}: empty read set")
        if not self.write_items <= self.read_set:
            raise ProtocolViolation(f"{self.txn_id}: write set must be part of the read set")

    @property
    def read_only(self) -> bool:
        return not self.write_items

    @property
    def write_set(self) -> dict[int, int]:
        """New value per written item: the observed version plus one."""
        return {
            item: self.observed[item].value + 1
            for item in sorted(self.write_items)
            if item in self.observed
        }

    @property
    def missing(self) -> frozenset[int]:
        return self.read_set - self.observed.keys()

    @property
    def finished(self) -> bool:
        return self.state in (TxnState.COMMITTED, TxnState.ABORTED)

    def transition(self, new_state: TxnState) -> None:
        if new_state not in _TRANSITIONS[self.state]:
            raise ProtocolViolation(
                f"{self.txn_id}: illegal transition {self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    def observe(self, item_id: int, observation: Observation) -> None:
        if item_id not in self.read_set:
            raise ProtocolViolation(f"{self.txn_id}: item {item_id} is not in the read set")
        self.observed[item_id] = observation


@dataclass(frozen=True)
class ConsistencyReport:
    stale_items: frozenset[int] = frozenset()
    unknown_items: frozenset[int] = frozenset()

    @property
    def consistent(self) -> bool:
        return not self.stale_items and not self.unknown_items


def build_cycle_frame(
    schedule: Sequence[DataItem],
    *,
    channel: int,
    cycle: int,
    header_units: int = 2,
    entry_units: int = 2,
    index_units: int | None = None,
) -> CycleFrame:
    """Lay out ``schedule`` as one cycle on ``channel``.

    Offsets are prefix sums of the item sizes. ``index_units`` overrides the
    cost of the control block; by default it is one entry per item.
    """
    seen: set[int] = set()
    entries: list[IndexEntry] = []
    values: list[int] = []
    offset = 0
    for item in schedule:
        if item.id in seen:
            raise ProtocolViolation(f"item {item.id} scheduled twice in cycle {cycle}")
        if item.last_disseminated_cycle >= cycle:
            raise ProtocolViolation(
                f"item {item.id} already disseminated in cycle "
                f"{item.last_disseminated_cycle}, cannot go out in cycle {cycle}"
            )
        seen.add(item.id)
        entries.append(
            IndexEntry(
                item_id=item.id,
                offset=offset,
                size=item.size,
                last_updated_cycle=item.last_updated_cycle,
                updated_flag=item.last_updated_cycle > item.last_disseminated_cycle,
            )
        )
        values.append(item.value)
        offset += item.size
    if index_units is None:
        index_units = len(entries) * entry_units
    return CycleFrame(
        channel=channel,
        cycle=cycle,
        index=tuple(entries),
        values=tuple(values),
        payload_length=offset,
        header_length=header_units,
        index_length=index_units,
    )


def disseminated(schedule: Iterable[DataItem], cycle: int) -> list[DataItem]:
    """The scheduled items as they stand once ``cycle`` has gone out."""
    return [replace(item, last_disseminated_cycle=cycle) for item in schedule]


def locate_item(frame: CycleFrame, item_id: int) -> IndexEntry | None:
    pos = frame.position_of(item_id)
    return None if pos is None else frame.index[pos]


def check_consistency(
    observed: Mapping[int, Observation] | MobileTransaction,
    index_view: Mapping[int, int],
) -> ConsistencyReport:
    """Compare observed update-cycle stamps against an index view.

    An item missing from ``index_view`` is unknown, not stale: absence from
    a cycle says nothing about freshness.
    """
    if isinstance(observed, MobileTransaction):
        observed = observed.observed
    if not observed:
        raise ProtocolViolation("consistency check needs at least one observation")
    stale: set[int] = set()
    unknown: set[int] = set()
    for item_id, observation in observed.items():
        stamp = index_view.get(item_id)
        if stamp is None:
            unknown.add(item_id)
        elif stamp != observation.update_cycle:
            stale.add(item_id)
    return ConsistencyReport(stale_items=frozenset(stale), unknown_items=frozenset(unknown))
