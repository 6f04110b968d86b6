"""Protocol abstraction shared by MCD, fresh, nxn and Perfect.

A protocol contributes server-side hooks (cycle scheduling, frame layout,
control overhead) and a client-side step function. Client steps are pure:
they read the transaction and the client's view and return a list of
actions; ``client.drive_mt`` applies them.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import ClassVar, Protocol as TypingProtocol

from app.core.errors import ProtocolViolation
from app.models import ProtocolId, SimConfig
from app.services.frames import (
    CycleFrame,
    MobileTransaction,
    Observation,
    TxnState,
    build_cycle_frame,
    check_consistency,
)
from app.services.server import CpDatabase, ValidationOutcome, assign_channels


# ---------------------------------------------------------------------------
# Events delivered to a client
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MtStarted:
    tick: int
    cycle: int = 0
    frames: Mapping[int, CycleFrame] = field(default_factory=dict)
    frame_start: int = 0
    # Full stamp view, only handed to omniscient clients
    stamps: Mapping[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class CycleStarted:
    tick: int
    cycle: int
    frames: Mapping[int, CycleFrame]
    stamps: Mapping[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class IndexDecoded:
    tick: int
    channel: int
    frame: CycleFrame
    frame_start: int


@dataclass(frozen=True)
class MatrixDecoded:
    tick: int
    channel: int
    frame: CycleFrame
    frame_start: int
    matrix: NxnMatrix


@dataclass(frozen=True)
class ItemReceived:
    tick: int
    channel: int
    cycle: int
    item_id: int
    value: int
    update_cycle: int
    start: int
    # Heard through continuous listening (fresh) rather than a planned slot
    continuous: bool = False
    fresh: bool = False


@dataclass(frozen=True)
class ResultReceived:
    tick: int
    outcome: ValidationOutcome


ClientEvent = (
    MtStarted | CycleStarted | IndexDecoded | MatrixDecoded | ItemReceived | ResultReceived
)


# ---------------------------------------------------------------------------
# Actions returned by client steps
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Doze:
    until_tick: int


@dataclass(frozen=True)
class ListenIndex:
    channel: int


@dataclass(frozen=True)
class ListenMatrix:
    channel: int


@dataclass(frozen=True)
class ListenItem:
    item_id: int
    channel: int
    cycle: int
    start: int
    end: int


@dataclass(frozen=True)
class ListenContinuous:
    channel: int


@dataclass(frozen=True)
class Check:
    count: int = 1


@dataclass(frozen=True)
class Observe:
    item_id: int
    observation: Observation


@dataclass(frozen=True)
class RecordView:
    channel: int
    cycle: int
    stamps: Mapping[int, int]


@dataclass(frozen=True)
class FlagStale:
    items: frozenset[int]


@dataclass(frozen=True)
class Forget:
    items: frozenset[int]


@dataclass(frozen=True)
class CommitLocal:
    tick: float


@dataclass(frozen=True)
class CommitConfirmed:
    tick: int


@dataclass(frozen=True)
class SendValidation:
    pass


@dataclass(frozen=True)
class RereadPending:
    items: frozenset[int]


@dataclass(frozen=True)
class AbortRestart:
    pass


ClientAction = (
    Doze
    | ListenIndex
    | ListenMatrix
    | ListenItem
    | ListenContinuous
    | Check
    | Observe
    | RecordView
    | FlagStale
    | Forget
    | CommitLocal
    | CommitConfirmed
    | SendValidation
    | RereadPending
    | AbortRestart
)


@dataclass(frozen=True)
class IndexView:
    cycle: int
    stamps: Mapping[int, int]


class ClientView(TypingProtocol):
    """What a client step may read about its wireless client."""

    @property
    def pending_reread(self) -> frozenset[int]: ...

    @property
    def index_views(self) -> Mapping[int, IndexView]: ...

    @property
    def flagged(self) -> frozenset[int]: ...

    @property
    def listening_channels(self) -> frozenset[int]: ...


# ---------------------------------------------------------------------------
# nxn control matrix
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NxnMatrix:
    n: int
    cells: frozenset[tuple[int, int]]
    last_disseminated: tuple[int, ...]
    size_units: int

    def cell(self, i: int, j: int) -> int:
        return int((i, j) in self.cells)

    def row(self, i: int) -> list[int]:
        return [self.cell(i, j) for j in range(self.n)]


def matrix_size_units(n: int, *, cell_bits: int = 1, unit_bits: int = 32) -> int:
    return math.ceil(n * n * cell_bits / unit_bits)


# ---------------------------------------------------------------------------
# Protocol interface
# ---------------------------------------------------------------------------
class Protocol(ABC):
    id: ClassVar[ProtocolId]
    # Synchronised dissemination cycles with a per-cycle frame
    cyclic: ClassVar[bool] = True
    # Clients see every frame and the full stamp view for free
    omniscient: ClassVar[bool] = False
    # Rejected items lead the next cycle of their channel
    prioritizes: ClassVar[bool] = True

    def __init__(self, config: SimConfig, assignment: Sequence[int] | None = None) -> None:
        self.config = config
        if assignment is None:
            assignment = assign_channels(
                config.n_items, config.n_channels, strategy=config.channel_strategy
            )
        self.assignment: tuple[int, ...] = tuple(assignment)

    @abstractmethod
    def control_overhead(self, n_items_in_cycle: int, n_database: int) -> int:
        """Header plus control units one channel spends per cycle."""

    @abstractmethod
    def client_step(
        self, mt: MobileTransaction, wc: ClientView, event: ClientEvent
    ) -> list[ClientAction]:
        """React to one event delivered to the client running ``mt``."""

    def capacity(self, group_size: int) -> int:
        if self.config.items_per_cycle is not None:
            return min(self.config.items_per_cycle, group_size)
        return min(group_size, math.ceil(self.config.dissemination_fraction * group_size))

    def schedule_cycle(
        self, db: CpDatabase, groups: Sequence[Sequence[int]], cycle: int
    ) -> dict[int, list[int]]:
        return mcd_schedule_cycle(
            db,
            groups,
            cycle,
            capacities=[self.capacity(len(group)) for group in groups],
            use_priority=self.prioritizes,
        )

    @property
    def header_units(self) -> int:
        return self.config.header_units

    def build_frame(
        self, db: CpDatabase, schedule: Sequence[int], *, channel: int, cycle: int
    ) -> CycleFrame:
        items = [db.item(item_id) for item_id in schedule]
        return build_cycle_frame(
            items,
            channel=channel,
            cycle=cycle,
            header_units=self.header_units,
            index_units=self.control_overhead(len(items), len(db.items)) - self.header_units,
        )


def mcd_schedule_cycle(
    db: CpDatabase,
    groups: Sequence[Sequence[int]],
    cycle: int,
    *,
    capacities: Sequence[int] | None = None,
    use_priority: bool = True,
    force_updated: bool = True,
) -> dict[int, list[int]]:
    """Order each channel's items for ``cycle``.

    Priority (rejected) items go first, items updated since their last
    dissemination are always included, and the remaining capacity is filled
    round-robin over the channel's group starting at its cursor.
    """
    schedules: dict[int, list[int]] = {}
    for channel, group in enumerate(groups):
        if cycle <= db.current_cycle.get(channel, 0):
            raise ProtocolViolation(f"cycle {cycle} on channel {channel} is already on the air")
        if not group:
            schedules[channel] = []
            continue
        capacity = len(group) if capacities is None else capacities[channel]
        head = db.take_priority(group) if use_priority else []
        placed = set(head)
        slots = max(capacity - len(head), 0)
        cursor = db.cursors.get(channel, 0) % len(group)
        window: list[int] = []
        walked = 0
        while len(window) < slots and walked < len(group):
            item_id = group[(cursor + walked) % len(group)]
            walked += 1
            if item_id not in placed:
                window.append(item_id)
                placed.add(item_id)
        db.cursors[channel] = (cursor + walked) % len(group)
        forced = (
            [i for i in group if i not in placed and db.updated_since_dissemination(i)]
            if force_updated
            else []
        )
        schedules[channel] = head + window + forced
    return schedules


def static_schedule(groups: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    return {channel: list(group) for channel, group in enumerate(groups)}


def tuned_channels(
    items: Iterable[int],
    assignment: Sequence[int],
    *,
    single_tuner: bool,
    cycle: int,
) -> list[int]:
    """Channels a client tunes to this cycle for ``items``.

    A single-tuner receiver visits one of them per cycle, rotating.
    """
    channels = sorted({assignment[item_id] for item_id in items})
    if not channels or not single_tuner:
        return channels
    return [channels[cycle % len(channels)]]


def planned_items(
    frame: CycleFrame, frame_start: int, wanted: Iterable[int], *, after: int
) -> list[ListenItem]:
    plans: list[ListenItem] = []
    for item_id in wanted:
        pos = frame.position_of(item_id)
        if pos is None:
            continue
        entry = frame.index[pos]
        start = frame.item_start(entry, frame_start)
        if start < after:
            continue
        plans.append(
            ListenItem(
                item_id=item_id,
                channel=frame.channel,
                cycle=frame.cycle,
                start=start,
                end=start + entry.size,
            )
        )
    return sorted(plans, key=lambda plan: plan.start)


def with_doze(plans: list[ListenItem], now: int) -> list[ClientAction]:
    actions: list[ClientAction] = []
    if plans and plans[0].start > now:
        actions.append(Doze(until_tick=plans[0].start))
    actions.extend(plans)
    return actions


def observation_of(event: ItemReceived) -> Observation:
    return Observation(
        value=event.value,
        update_cycle=event.update_cycle,
        read_cycle=event.cycle,
        channel=event.channel,
        read_tick=event.tick,
    )


def still_needed(mt: MobileTransaction, wc: ClientView) -> frozenset[int]:
    if mt.state is TxnState.REREADING:
        return wc.pending_reread
    return mt.missing


def decide_from_views(
    mt: MobileTransaction,
    observed: Mapping[int, Observation],
    wc: ClientView,
    *,
    cycle: int,
    tick: float,
) -> list[ClientAction]:
    """Local commit for a read-only MT consistent with this cycle's views.

    Anything else, including items without a current-cycle view, goes to
    the content provider for validation.
    """
    view: dict[int, int] = {}
    for channel in {obs.channel for obs in observed.values()}:
        index_view = wc.index_views.get(channel)
        if index_view is not None and index_view.cycle == cycle:
            view.update(index_view.stamps)
    report = check_consistency(observed, view)
    if report.consistent and mt.read_only:
        return [CommitLocal(tick=tick)]
    return [SendValidation()]
